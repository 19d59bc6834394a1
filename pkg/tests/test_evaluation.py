"""Tests for retrieval metrics, localization metrics, and fusion."""

import numpy as np
import pytest

import oracles
from twobranch import data
from twobranch import evaluation as ev
from twobranch.errors import (
    ConfigError,
    ConsistencyError,
    EvaluationError,
    FormatError,
)


class TestRecallAtK:
    def test_diagonal_dominant(self):
        d = np.full((3, 3), 0.9)
        np.fill_diagonal(d, 0.1)
        pos = [[0], [1], [2]]
        assert ev.recall_at_k(d, pos, 1) == 100.0

    def test_positive_ranked_fifth(self):
        d = np.arange(10, dtype=np.float64).reshape(1, 10)
        pos = [[4]]
        assert ev.recall_at_k(d, pos, 1) == 0.0
        assert ev.recall_at_k(d, pos, 4) == 0.0
        assert ev.recall_at_k(d, pos, 5) == 100.0

    def test_matches_sort_oracle(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            d = rng.random((20, 100))
            pos = [rng.choice(100, size=int(rng.integers(1, 4)),
                              replace=False).tolist() for _ in range(20)]
            for k in (1, 5, 10):
                assert ev.recall_at_k(d, pos, k) == \
                    oracles.naive_recall_at_k(d, pos, k)

    def test_ties_break_by_index(self):
        d = np.zeros((1, 4))
        assert ev.recall_at_k(d, [[0]], 1) == 100.0
        assert ev.recall_at_k(d, [[3]], 1) == 0.0
        assert ev.recall_at_k(d, [[3]], 4) == 100.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(6)
        d = rng.random((12, 30))
        pos = [[int(rng.integers(30))] for _ in range(12)]
        values = [ev.recall_at_k(d, pos, k) for k in range(1, 31)]
        for a, b in zip(values, values[1:]):
            assert a <= b
        assert values[-1] == 100.0

    def test_errors(self):
        d = np.zeros((2, 3))
        with pytest.raises(ConfigError):
            ev.recall_at_k(d, [[0], [1]], 0)
        with pytest.raises(EvaluationError):
            ev.recall_at_k(d, [[0], []], 1)
        with pytest.raises(ConsistencyError):
            ev.recall_at_k(d, [[0]], 1)

    def test_evaluate_retrieval_directions(self):
        rng = np.random.default_rng(7)
        d = rng.random((6, 9))
        by_x = [[int(rng.integers(9))] for _ in range(6)]
        by_y = [[int(rng.integers(6))] for _ in range(9)]
        report = ev.evaluate_retrieval(d, by_x, by_y, ks=(1, 5))
        assert report.image_to_sentence[5] == ev.recall_at_k(d, by_x, 5)
        assert report.sentence_to_image[1] == ev.recall_at_k(d.T, by_y, 1)
        rows = report.rows()
        assert [r[1:3] for r in rows] == [
            ("image_to_sentence", 1), ("image_to_sentence", 5),
            ("sentence_to_image", 1), ("sentence_to_image", 5)]


class TestMeanNeighborhoodDistance:
    def test_hand_pair(self):
        emb = np.array([[0.0, 0.0], [3.0, 4.0]])
        neighbors = [{0, 1}, {0, 1}]
        assert ev.mean_neighborhood_distance(emb, neighbors) == 5.0

    def test_self_only_is_zero(self):
        emb = np.array([[0.0, 0.0], [3.0, 4.0]])
        assert ev.mean_neighborhood_distance(emb, [{0}, {1}]) == 0.0


class TestIou:
    def test_identical(self):
        b = ev.Box(0, 0, 10, 10)
        assert ev.iou(b, b) == 1.0

    def test_quarter_overlap(self):
        a = ev.Box(0, 0, 10, 10)
        b = ev.Box(5, 5, 15, 15)
        assert ev.iou(a, b) == 25.0 / 175.0

    def test_disjoint(self):
        a = ev.Box(0, 0, 10, 10)
        b = ev.Box(20, 20, 30, 30)
        assert ev.iou(a, b) == 0.0

    def test_touching_edge(self):
        a = ev.Box(0, 0, 10, 10)
        b = ev.Box(10, 0, 20, 10)
        assert ev.iou(a, b) == 0.0

    def test_symmetry_random(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            vals = rng.uniform(0, 50, size=8)
            a = ev.Box(vals[0], vals[1], vals[0] + 1 + vals[2],
                       vals[1] + 1 + vals[3])
            b = ev.Box(vals[4], vals[5], vals[4] + 1 + vals[6],
                       vals[5] + 1 + vals[7])
            assert ev.iou(a, b) == ev.iou(b, a)
            assert 0.0 <= ev.iou(a, b) <= 1.0
            assert ev.iou(a, a) == 1.0
            got = ev.iou(a, b)
            want = oracles.naive_iou(a.as_tuple(), b.as_tuple())
            assert got == want

    def test_degenerate_box_rejected(self):
        with pytest.raises(ConfigError):
            ev.Box(0, 0, 0, 10)
        with pytest.raises(ConfigError):
            ev.Box(5, 5, 4, 10)


def random_boxes(rng, n):
    out = np.zeros((n, 4))
    out[:, 0] = rng.uniform(0, 60, size=n)
    out[:, 1] = rng.uniform(0, 60, size=n)
    out[:, 2] = out[:, 0] + rng.uniform(5, 40, size=n)
    out[:, 3] = out[:, 1] + rng.uniform(5, 40, size=n)
    return out


class TestNms:
    def test_two_overlapping_keeps_better(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 6]], dtype=float)
        assert oracles.naive_iou(boxes[0], boxes[1]) == 0.6
        kept = ev.nms(boxes, np.array([0.2, 0.1]), 0.5)
        assert kept == [1]

    def test_disjoint_all_kept(self):
        boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30],
                          [50, 50, 60, 60]], dtype=float)
        kept = ev.nms(boxes, np.array([0.3, 0.1, 0.2]), 0.5)
        assert sorted(kept) == [0, 1, 2]
        assert kept == [1, 2, 0]

    def test_matches_naive_oracle(self):
        for seed in range(8):
            rng = np.random.default_rng(seed)
            boxes = random_boxes(rng, 30)
            dist = rng.random(30)
            got = ev.nms(boxes, dist, 0.4)
            want = oracles.naive_nms(boxes, (-dist).tolist(), 0.4)
            assert got == want
            got_desc = ev.nms(boxes, dist, 0.4, ascending_is_better=False)
            want_desc = oracles.naive_nms(boxes, dist.tolist(), 0.4)
            assert got_desc == want_desc

    def test_kept_boxes_weakly_overlap(self):
        rng = np.random.default_rng(9)
        boxes = random_boxes(rng, 25)
        kept = ev.nms(boxes, rng.random(25), 0.3)
        for i in kept:
            for j in kept:
                if i != j:
                    assert oracles.naive_iou(boxes[i], boxes[j]) <= 0.3

    def test_length_mismatch(self):
        with pytest.raises(ConsistencyError):
            ev.nms(np.zeros((2, 4)) + [0, 0, 1, 1], np.zeros(3), 0.5)


def corpus_rows_fixture():
    return [
        ("im_a", "G", "cat", 0.0, 0.0, 10.0, 10.0, None),
        ("im_a", "P", "cat", 0.0, 0.0, 10.0, 10.0, 0),
        ("im_a", "P", "cat", 30.0, 30.0, 40.0, 40.0, 1),
        ("im_b", "G", "cat", 5.0, 5.0, 20.0, 20.0, None),
        ("im_b", "P", "cat", 5.0, 5.0, 20.0, 20.0, 2),
        ("im_b", "P", "dog", 50.0, 50.0, 60.0, 60.0, 3),
        ("im_b", "G", "dog", 50.0, 50.0, 60.0, 60.0, None),
    ]


def tiny_sets():
    phrases = data.FeatureSet(ids=["cat", "dog"], features=np.zeros((2, 3)))
    regions = data.FeatureSet(ids=[f"r{i}" for i in range(4)],
                              features=np.zeros((4, 3)))
    return phrases, regions


class TestCorpusIO:
    def test_rows_round_trip(self, tmp_path):
        rows = corpus_rows_fixture()
        path = str(tmp_path / "corpus.tsv")
        ev.save_corpus_file(rows, path)
        assert ev.load_corpus_rows(path) == rows

    def test_comments_and_blanks(self, tmp_path):
        path = str(tmp_path / "corpus.tsv")
        with open(path, "w") as fh:
            fh.write("# header\n\nim_a\tP\tcat\t0.0\t0.0\t5.0\t5.0\t0\n")
        rows = ev.load_corpus_rows(path)
        assert rows == [("im_a", "P", "cat", 0.0, 0.0, 5.0, 5.0, 0)]

    def test_bad_column_count(self, tmp_path):
        path = str(tmp_path / "corpus.tsv")
        with open(path, "w") as fh:
            fh.write("im_a\tP\tcat\t0.0\n")
        with pytest.raises(FormatError):
            ev.load_corpus_rows(path)

    def test_bad_kind(self, tmp_path):
        path = str(tmp_path / "corpus.tsv")
        with open(path, "w") as fh:
            fh.write("im_a\tQ\tcat\t0.0\t0.0\t5.0\t5.0\t0\n")
        with pytest.raises(FormatError):
            ev.load_corpus_rows(path)

    def test_bad_number(self, tmp_path):
        path = str(tmp_path / "corpus.tsv")
        with open(path, "w") as fh:
            fh.write("im_a\tP\tcat\t0.0\t0.0\tfive\t5.0\t0\n")
        with pytest.raises(FormatError):
            ev.load_corpus_rows(path)

    def test_grouping(self):
        phrases, regions = tiny_sets()
        corpus = ev.corpus_from_rows(corpus_rows_fixture(), phrases, regions)
        keys = [(q.image_id, q.phrase_id) for q in corpus.queries]
        assert keys == [("im_a", "cat"), ("im_b", "cat"), ("im_b", "dog")]
        q0 = corpus.queries[0]
        assert q0.phrase_row == 0
        assert q0.proposal_rows.tolist() == [0, 1]
        assert q0.gt_boxes.shape == (1, 4)
        assert q0.gt_rows.tolist() == [-1]
        assert corpus.unique_phrases() == ["cat", "dog"]
        assert corpus.region_rows_by_image() == {"im_a": [0, 1],
                                                 "im_b": [2, 3]}

    def test_proposal_without_feature_row(self):
        phrases, regions = tiny_sets()
        rows = [("im_a", "P", "cat", 0.0, 0.0, 5.0, 5.0, None)]
        with pytest.raises(ConsistencyError):
            ev.corpus_from_rows(rows, phrases, regions)

    def test_feature_row_out_of_bounds(self):
        phrases, regions = tiny_sets()
        rows = [("im_a", "P", "cat", 0.0, 0.0, 5.0, 5.0, 9)]
        with pytest.raises(ConsistencyError):
            ev.corpus_from_rows(rows, phrases, regions)

    def test_query_without_proposals(self):
        phrases, regions = tiny_sets()
        rows = [("im_a", "G", "cat", 0.0, 0.0, 5.0, 5.0, None)]
        with pytest.raises(ConsistencyError):
            ev.corpus_from_rows(rows, phrases, regions)

    def test_too_many_proposals(self):
        phrases, regions = tiny_sets()
        rows = [("im_a", "P", "cat", float(i), 0.0, float(i) + 1.0, 5.0, 0)
                for i in range(101)]
        with pytest.raises(ConsistencyError):
            ev.corpus_from_rows(rows, phrases, regions)

    def test_zero_area_box(self):
        phrases, regions = tiny_sets()
        rows = [("im_a", "P", "cat", 5.0, 0.0, 5.0, 5.0, 0)]
        with pytest.raises(ConsistencyError):
            ev.corpus_from_rows(rows, phrases, regions)

    def test_generated_corpus_loads(self, tmp_path):
        d = data.gen_localization(3, 2, 8, 6, seed=1)
        path = str(tmp_path / "corpus.tsv")
        ev.save_corpus_file(d.corpus_rows, path)
        corpus = ev.load_corpus_file(path, d.phrases, d.regions)
        assert len(corpus.queries) == 6
        for q in corpus.queries:
            assert q.proposal_boxes.shape == (9, 4)
            assert q.gt_boxes.shape == (1, 4)


def single_query_corpus(proposals, gts, phrase_id="cat"):
    """Corpus with one query; proposals/gts are box tuples."""
    rows = []
    for g in gts:
        rows.append(("im_0", "G", phrase_id) + tuple(map(float, g)) + (None,))
    for i, p in enumerate(proposals):
        rows.append(("im_0", "P", phrase_id) + tuple(map(float, p)) + (i,))
    phrases = data.FeatureSet(ids=[phrase_id], features=np.zeros((1, 2)))
    regions = data.FeatureSet(ids=[f"r{i}" for i in range(len(proposals))],
                              features=np.zeros((len(proposals), 2)))
    return ev.corpus_from_rows(rows, phrases, regions)


class TestLocalizationRecall:
    def test_exact_gt_copy_hits_at_one(self):
        corpus = single_query_corpus(
            proposals=[(0, 0, 10, 10), (50, 50, 60, 60)],
            gts=[(0, 0, 10, 10)])
        dist = [np.array([0.1, 0.9])]
        assert ev.localization_recall_at_k(corpus, dist, 1) == 100.0

    def test_no_overlap_misses_everywhere(self):
        corpus = single_query_corpus(
            proposals=[(50, 50, 60, 60), (70, 70, 90, 90)],
            gts=[(0, 0, 10, 10)])
        dist = [np.array([0.1, 0.2])]
        for k in (1, 2, 50):
            assert ev.localization_recall_at_k(corpus, dist, k) == 0.0

    def test_three_query_hand_count(self):
        rows = []
        boxes = {
            "q0": ([(0, 0, 10, 10), (40, 40, 50, 50)], (0, 0, 10, 10)),
            "q1": ([(40, 40, 50, 50), (0, 0, 10, 10)], (0, 0, 10, 10)),
            "q2": ([(40, 40, 50, 50), (70, 70, 80, 80)], (0, 0, 10, 10)),
        }
        feat = 0
        for name, (props, gt) in boxes.items():
            rows.append((name, "G", name) + tuple(map(float, gt)) + (None,))
            for p in props:
                rows.append((name, "P", name) + tuple(map(float, p)) + (feat,))
                feat += 1
        phrases = data.FeatureSet(ids=list(boxes), features=np.zeros((3, 2)))
        regions = data.FeatureSet(ids=[f"r{i}" for i in range(feat)],
                                  features=np.zeros((feat, 2)))
        corpus = ev.corpus_from_rows(rows, phrases, regions)
        dist = [np.array([0.1, 0.2]), np.array([0.1, 0.2]),
                np.array([0.1, 0.2])]
        assert ev.localization_recall_at_k(corpus, dist, 1) == 100.0 / 3.0
        assert ev.localization_recall_at_k(corpus, dist, 2) == 200.0 / 3.0

    def test_query_without_gt_is_a_miss(self):
        rows = [("im_0", "P", "cat", 0.0, 0.0, 10.0, 10.0, 0)]
        phrases = data.FeatureSet(ids=["cat"], features=np.zeros((1, 2)))
        regions = data.FeatureSet(ids=["r0"], features=np.zeros((1, 2)))
        corpus = ev.corpus_from_rows(rows, phrases, regions)
        dist = [np.array([0.1])]
        assert ev.localization_recall_at_k(corpus, dist, 1) == 0.0

    def test_errors(self):
        corpus = single_query_corpus(
            proposals=[(0, 0, 10, 10)], gts=[(0, 0, 10, 10)])
        with pytest.raises(ConfigError):
            ev.localization_recall_at_k(corpus, [np.array([0.1])], 0)
        with pytest.raises(ConsistencyError):
            ev.localization_recall_at_k(corpus, [], 1)
        with pytest.raises(ConsistencyError):
            ev.localization_recall_at_k(corpus, [np.array([0.1, 0.2])], 1)


class TestPhraseMap:
    def test_one_zero_one_pattern(self):
        corpus = single_query_corpus(
            proposals=[(0, 0, 10, 10), (30, 0, 40, 10), (60, 0, 70, 10)],
            gts=[(0, 0, 10, 10), (60, 0, 70, 10)])
        dist = [np.array([0.1, 0.2, 0.3])]
        map_value, per_phrase, skipped = ev.phrase_map(corpus, dist)
        assert abs(per_phrase["cat"] - (1.0 + 2.0 / 3.0) / 2.0) < 1e-15
        assert map_value == per_phrase["cat"]
        assert skipped == []

    def test_all_correct_is_one(self):
        corpus = single_query_corpus(
            proposals=[(0, 0, 10, 10), (60, 0, 70, 10)],
            gts=[(0, 0, 10, 10), (60, 0, 70, 10)])
        dist = [np.array([0.2, 0.1])]
        _, per_phrase, _ = ev.phrase_map(corpus, dist)
        assert per_phrase["cat"] == 1.0

    def test_two_phrase_hand_map(self):
        rows = [
            ("im_0", "G", "cat", 0.0, 0.0, 10.0, 10.0, None),
            ("im_0", "P", "cat", 0.0, 0.0, 10.0, 10.0, 0),
            ("im_1", "G", "dog", 0.0, 0.0, 10.0, 10.0, None),
            ("im_1", "P", "dog", 40.0, 40.0, 50.0, 50.0, 1),
            ("im_1", "P", "dog", 0.0, 0.0, 10.0, 10.0, 2),
        ]
        phrases = data.FeatureSet(ids=["cat", "dog"],
                                  features=np.zeros((2, 2)))
        regions = data.FeatureSet(ids=["r0", "r1", "r2"],
                                  features=np.zeros((3, 2)))
        corpus = ev.corpus_from_rows(rows, phrases, regions)
        dist = [np.array([0.1]), np.array([0.1, 0.2])]
        map_value, per_phrase, _ = ev.phrase_map(corpus, dist)
        assert per_phrase["cat"] == 1.0
        assert per_phrase["dog"] == 0.5
        assert map_value == 0.75

    def test_gt_consumed_once(self):
        corpus = single_query_corpus(
            proposals=[(0, 0, 10, 6), (0, 4, 10, 10), (50, 50, 60, 60)],
            gts=[(0, 0, 10, 10), (50, 50, 60, 60)])
        assert oracles.naive_iou((0, 0, 10, 6), (0, 4, 10, 10)) <= 0.3
        dist = [np.array([0.1, 0.2, 0.3])]
        _, per_phrase, _ = ev.phrase_map(corpus, dist)
        assert abs(per_phrase["cat"] - (1.0 + 2.0 / 3.0) / 2.0) < 1e-15

    def test_nms_prunes_before_ranking(self):
        far = (50.0, 50.0, 60.0, 60.0)
        corpus = single_query_corpus(
            proposals=[far, far, (0, 0, 10, 10)],
            gts=[(0, 0, 10, 10)])
        dist = [np.array([0.1, 0.2, 0.3])]
        _, per_phrase, _ = ev.phrase_map(corpus, dist)
        assert per_phrase["cat"] == 0.5

    def test_phrase_without_gt_excluded(self):
        rows = [
            ("im_0", "G", "cat", 0.0, 0.0, 10.0, 10.0, None),
            ("im_0", "P", "cat", 0.0, 0.0, 10.0, 10.0, 0),
            ("im_0", "P", "dog", 40.0, 40.0, 50.0, 50.0, 1),
        ]
        phrases = data.FeatureSet(ids=["cat", "dog"],
                                  features=np.zeros((2, 2)))
        regions = data.FeatureSet(ids=["r0", "r1"], features=np.zeros((2, 2)))
        corpus = ev.corpus_from_rows(rows, phrases, regions)
        dist = [np.array([0.1]), np.array([0.1])]
        map_value, per_phrase, skipped = ev.phrase_map(corpus, dist)
        assert skipped == ["dog"]
        assert set(per_phrase) == {"cat"}

    def test_no_gt_anywhere(self):
        rows = [("im_0", "P", "cat", 0.0, 0.0, 10.0, 10.0, 0)]
        phrases = data.FeatureSet(ids=["cat"], features=np.zeros((1, 2)))
        regions = data.FeatureSet(ids=["r0"], features=np.zeros((1, 2)))
        corpus = ev.corpus_from_rows(rows, phrases, regions)
        with pytest.raises(EvaluationError):
            ev.phrase_map(corpus, [np.array([0.1])])

    def test_matches_flag_oracle_on_random_fixtures(self):
        for seed in range(6):
            rng = np.random.default_rng(seed)
            rows = []
            dists = []
            feat = 0
            want_flags = {}
            n_queries = int(rng.integers(3, 7))
            for qi in range(n_queries):
                phrase = f"p{int(rng.integers(2))}"
                image = f"im_{qi}"
                gt = (0.0, 0.0, 10.0, 10.0)
                rows.append((image, "G", phrase) + gt + (None,))
                entries = []
                n_props = int(rng.integers(2, 5))
                hit_slot = int(rng.integers(n_props))
                base = 100.0 * (qi + 1)
                for p in range(n_props):
                    if p == hit_slot:
                        box = gt
                    else:
                        box = (base + 20.0 * p, 0.0,
                               base + 20.0 * p + 10.0, 10.0)
                    rows.append((image, "P", phrase)
                                + tuple(map(float, box)) + (feat,))
                    entries.append(rng.random())
                    feat += 1
                    want_flags.setdefault(phrase, []).append(
                        (entries[-1], p == hit_slot))
                dists.append(np.array(entries))
            phrases = data.FeatureSet(
                ids=["p0", "p1"], features=np.zeros((2, 2)))
            regions = data.FeatureSet(
                ids=[f"r{i}" for i in range(feat)],
                features=np.zeros((feat, 2)))
            corpus = ev.corpus_from_rows(rows, phrases, regions)
            _, per_phrase, _ = ev.phrase_map(corpus, dists)
            for phrase, entries in want_flags.items():
                flags = [f for _, f in sorted(entries)]
                want = oracles.naive_average_precision(flags)
                assert abs(per_phrase[phrase] - want) < 1e-12


class TestQueryDistances:
    def test_matches_manual_norms(self):
        d = data.gen_localization(2, 1, 6, 5, seed=4)
        rng = np.random.default_rng(0)
        phrase_emb = rng.normal(size=(d.phrases.n, 3))
        region_emb = rng.normal(size=(d.regions.n, 3))
        corpus = ev.corpus_from_rows(d.corpus_rows, d.phrases, d.regions)
        got = ev.query_distances(corpus, phrase_emb, region_emb)
        for q, vec in zip(corpus.queries, got):
            for j, row in enumerate(q.proposal_rows):
                want = oracles.dist(region_emb[row],
                                    phrase_emb[q.phrase_row])
                assert abs(vec[j] - want) < 1e-12

    def test_threads_do_not_change_values(self):
        d = data.gen_localization(3, 2, 6, 5, seed=5)
        rng = np.random.default_rng(1)
        phrase_emb = rng.normal(size=(d.phrases.n, 3))
        region_emb = rng.normal(size=(d.regions.n, 3))
        corpus = ev.corpus_from_rows(d.corpus_rows, d.phrases, d.regions)
        one = ev.query_distances(corpus, phrase_emb, region_emb, threads=1)
        four = ev.query_distances(corpus, phrase_emb, region_emb, threads=4)
        for a, b in zip(one, four):
            assert np.array_equal(a, b)


class TestWeightedDistance:
    def test_endpoints(self):
        assert ev.weighted_distance(0.5, 0.1, 0.0) == 0.5
        assert ev.weighted_distance(0.5, 0.1, 1.0) == 0.1

    def test_seven_tenths(self):
        assert abs(ev.weighted_distance(0.5, 0.1, 0.7) - 0.22) < 1e-12

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            ev.weighted_distance(0.5, 0.1, -0.01)
        with pytest.raises(ConfigError):
            ev.weighted_distance(0.5, 0.1, 1.01)

    def test_affine_in_alpha(self):
        for alpha in (0.25, 0.5, 0.9):
            d0 = ev.weighted_distance(0.8, 0.3, 0.0)
            d1 = ev.weighted_distance(0.8, 0.3, 1.0)
            want = (1 - alpha) * d0 + alpha * d1
            assert abs(ev.weighted_distance(0.8, 0.3, alpha) - want) < 1e-15


class TestRegionPhraseDistance:
    def test_min_over_regions(self):
        phrase = np.array([[0.0, 0.0]])
        regions = np.array([[0.4, 0.0], [0.2, 0.0], [0.9, 0.0]])
        assert abs(ev.region_phrase_distance(phrase, regions) - 0.2) < 1e-12

    def test_mean_over_phrases(self):
        phrases = np.array([[0.0, 0.0], [10.0, 0.0]])
        regions = np.array([[0.2, 0.0], [10.4, 0.0], [50.0, 50.0]])
        got = ev.region_phrase_distance(phrases, regions)
        assert abs(got - 0.3) < 1e-12

    def test_zero_phrases_returns_none(self):
        assert ev.region_phrase_distance(np.zeros((0, 2)),
                                         np.ones((3, 2))) is None

    def test_zero_regions_rejected(self):
        with pytest.raises(EvaluationError):
            ev.region_phrase_distance(np.ones((1, 2)), np.zeros((0, 2)))


def fusion_fixture():
    rng = np.random.default_rng(12)
    d_global = rng.random((3, 4))
    phrase_emb = rng.normal(size=(5, 3))
    region_emb = rng.normal(size=(7, 3))
    region_rows = {"im_0": [0, 1], "im_1": [2, 3, 4], "im_2": [5, 6]}
    image_ids = ["im_0", "im_1", "im_2"]
    phrase_rows = [[0], [1, 2], [], [3, 4]]
    return (d_global, phrase_emb, region_emb, region_rows, image_ids,
            phrase_rows)


class TestFusedDistanceMatrix:
    def test_alpha_zero_is_global(self):
        args = fusion_fixture()
        fused = ev.fused_distance_matrix(*args, alpha=0.0)
        assert np.array_equal(fused, args[0])

    def test_alpha_one_matches_loops(self):
        (d_global, phrase_emb, region_emb, region_rows, image_ids,
         phrase_rows) = fusion_fixture()
        fused = ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                         region_rows, image_ids,
                                         phrase_rows, alpha=1.0)
        for i, image_id in enumerate(image_ids):
            for j, rows in enumerate(phrase_rows):
                if not rows:
                    assert fused[i, j] == d_global[i, j]
                    continue
                parts = []
                for pr in rows:
                    best = min(
                        oracles.dist(phrase_emb[pr], region_emb[rr])
                        for rr in region_rows[image_id])
                    parts.append(best)
                assert abs(fused[i, j] - np.mean(parts)) < 1e-12

    def test_midpoint_alpha_matches_formula(self):
        args = fusion_fixture()
        d_global = args[0]
        f0 = ev.fused_distance_matrix(*args, alpha=0.0)
        f1 = ev.fused_distance_matrix(*args, alpha=1.0)
        f7 = ev.fused_distance_matrix(*args, alpha=0.7)
        want = 0.3 * f0 + 0.7 * f1
        assert np.allclose(f7, want, rtol=0, atol=1e-12)
        assert f7.shape == d_global.shape

    def test_fusion_can_flip_ranking(self):
        d_global = np.array([[0.40], [0.50]])
        phrase_emb = np.array([[0.0, 0.0]])
        region_emb = np.array([[2.0, 0.0], [0.1, 0.0]])
        region_rows = {"im_0": [0], "im_1": [1]}
        fused = ev.fused_distance_matrix(
            d_global, phrase_emb, region_emb, region_rows,
            ["im_0", "im_1"], [[0]], alpha=0.7)
        assert np.argmin(d_global[:, 0]) == 0
        assert np.argmin(fused[:, 0]) == 1

    def test_image_without_regions(self):
        (d_global, phrase_emb, region_emb, region_rows, image_ids,
         phrase_rows) = fusion_fixture()
        region_rows = dict(region_rows)
        del region_rows["im_1"]
        with pytest.raises(EvaluationError):
            ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                     region_rows, image_ids, phrase_rows,
                                     alpha=0.5)
        all_empty = [[] for _ in phrase_rows]
        fused = ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                         region_rows, image_ids, all_empty,
                                         alpha=0.5)
        assert np.array_equal(fused, d_global)

    def test_shape_checks(self):
        (d_global, phrase_emb, region_emb, region_rows, image_ids,
         phrase_rows) = fusion_fixture()
        with pytest.raises(ConsistencyError):
            ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                     region_rows, image_ids[:-1],
                                     phrase_rows, alpha=0.5)
        with pytest.raises(ConsistencyError):
            ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                     region_rows, image_ids,
                                     phrase_rows[:-1], alpha=0.5)
        with pytest.raises(ConfigError):
            ev.fused_distance_matrix(d_global, phrase_emb, region_emb,
                                     region_rows, image_ids, phrase_rows,
                                     alpha=1.5)

    def test_threads_bitwise_equal(self):
        args = fusion_fixture()
        one = ev.fused_distance_matrix(*args, alpha=0.6, threads=1)
        four = ev.fused_distance_matrix(*args, alpha=0.6, threads=4)
        assert np.array_equal(one, four)


class TestReportCsv:
    def test_deterministic_bytes(self, tmp_path):
        rows = [("recall", "image_to_sentence", 1, 62.5),
                ("recall", "sentence_to_image", 5, 100.0 / 3.0)]
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        ev.write_report_csv(str(a), rows, config_lines=("alpha=0.7",))
        ev.write_report_csv(str(b), rows, config_lines=("alpha=0.7",))
        assert a.read_bytes() == b.read_bytes()
        text = a.read_text().splitlines()
        assert text[0] == "# alpha=0.7"
        assert text[1] == "metric,direction,k,value"
        assert text[2] == f"recall,image_to_sentence,1,{62.5!r}"
