"""Retrieval and phrase-localization metrics, plus distance fusion.

Rankings sort ascending distance with ties broken by candidate index,
so every metric is deterministic for fixed inputs.  The localization
side consumes a proposal/GT corpus in the TSV format documented at
``load_corpus_file`` and scores per-query distances produced by a
region-phrase model.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ConsistencyError,
    EvaluationError,
    FormatError,
)
from .tensor_core import as_matrix, pairwise_distances

MAX_PROPOSALS_PER_QUERY = 100


def _parallel_map(fn, items, threads):
    """Apply fn preserving order, optionally on a thread pool."""
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# retrieval


def recall_at_k(distances, positives, k):
    """Percentage of queries with a positive among the k nearest.

    Args:
        distances: (num_queries, num_candidates) matrix.
        positives: per-query collection of correct candidate indices;
            every query must have at least one.
        k: cutoff, >= 1.

    Returns:
        float percentage in [0, 100].
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    distances = as_matrix(distances, "distances")
    nq, nc = distances.shape
    if len(positives) != nq:
        raise ConsistencyError(
            f"{len(positives)} positive sets for {nq} queries"
        )
    hits = 0
    for q in range(nq):
        pos = set(int(p) for p in positives[q])
        if not pos:
            raise EvaluationError(f"query {q} has no positives")
        top = np.argsort(distances[q], kind="stable")[:k]
        if any(int(c) in pos for c in top):
            hits += 1
    return 100.0 * hits / nq


@dataclass(frozen=True)
class RetrievalReport:
    """Recall percentages keyed by k, one dict per direction."""

    image_to_sentence: dict
    sentence_to_image: dict

    def rows(self):
        out = []
        for direction, table in (
            ("image_to_sentence", self.image_to_sentence),
            ("sentence_to_image", self.sentence_to_image),
        ):
            for k in sorted(table):
                out.append(("recall", direction, k, table[k]))
        return out


def evaluate_retrieval(distances, pos_y_by_x, pos_x_by_y, ks=(1, 5, 10)):
    """Recall@k in both directions from one cross-view distance matrix.

    Args:
        distances: (num_x, num_y) matrix of image-sentence distances.
        pos_y_by_x: per-image list of positive sentence indices.
        pos_x_by_y: per-sentence list of positive image indices.
        ks: cutoffs.

    Returns:
        RetrievalReport.
    """
    distances = as_matrix(distances, "distances")
    i2s = {k: recall_at_k(distances, pos_y_by_x, k) for k in ks}
    s2i = {k: recall_at_k(distances.T, pos_x_by_y, k) for k in ks}
    return RetrievalReport(image_to_sentence=i2s, sentence_to_image=s2i)


def mean_neighborhood_distance(emb, neighbors):
    """Mean embedded distance over ordered within-neighborhood pairs.

    Pairs (i, j) with j in N(i), j != i.  Returns 0.0 when no such
    pair exists.
    """
    emb = as_matrix(emb, "emb")
    dists = []
    for i, members in enumerate(neighbors):
        for j in sorted(members):
            if j == i:
                continue
            dists.append(float(np.linalg.norm(emb[i] - emb[j])))
    if not dists:
        return 0.0
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corners (x1, y1) top-left exclusive-free."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ConfigError(
                f"box must have positive area, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a, b):
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _iou_one_vs_many(box, boxes):
    """IoU of one (4,) box against an (n, 4) array."""
    ix = (np.minimum(box[2], boxes[:, 2])
          - np.maximum(box[0], boxes[:, 0]))
    iy = (np.minimum(box[3], boxes[:, 3])
          - np.maximum(box[1], boxes[:, 1]))
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    out = np.zeros(len(boxes))
    nz = union > 0.0
    out[nz] = inter[nz] / union[nz]
    return out


def nms(boxes, scores, overlap_thresh, ascending_is_better=True):
    """Greedy non-maximum suppression.

    Repeatedly keeps the best-scoring remaining box and drops every
    remaining box whose IoU with it exceeds overlap_thresh.  Score
    ties break toward the lower index.

    Args:
        boxes: (n, 4) array of (x1, y1, x2, y2).
        scores: (n,) array; "best" is smallest when
            ascending_is_better (distances), largest otherwise.
        overlap_thresh: IoU above this suppresses.

    Returns:
        list of kept indices, best first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ConsistencyError(
            f"{boxes.shape[0]} boxes for {scores.shape[0]} scores"
        )
    if ascending_is_better:
        order = list(np.argsort(scores, kind="stable"))
    else:
        order = list(np.argsort(-scores, kind="stable"))
    kept = []
    alive = np.ones(len(order), dtype=bool)
    for rank, idx in enumerate(order):
        if not alive[rank]:
            continue
        kept.append(int(idx))
        rest = [r for r in range(rank + 1, len(order)) if alive[r]]
        if not rest:
            continue
        rest_idx = [order[r] for r in rest]
        overlaps = _iou_one_vs_many(boxes[idx], boxes[rest_idx])
        for r, ov in zip(rest, overlaps):
            if ov > overlap_thresh:
                alive[r] = False
    return kept


# ---------------------------------------------------------------------------
# localization corpus


@dataclass
class LocalizationQuery:
    """One (image, phrase) evaluation unit."""

    image_id: str
    phrase_id: str
    phrase_row: int
    proposal_boxes: np.ndarray
    proposal_rows: np.ndarray
    gt_boxes: np.ndarray
    gt_rows: np.ndarray


@dataclass
class LocalizationCorpus:
    queries: list = field(default_factory=list)

    def unique_phrases(self):
        seen = []
        have = set()
        for q in self.queries:
            if q.phrase_id not in have:
                have.add(q.phrase_id)
                seen.append(q.phrase_id)
        return seen

    def queries_of_phrase(self, phrase_id):
        return [q for q in self.queries if q.phrase_id == phrase_id]

    def region_rows_by_image(self):
        """Sorted unique proposal feature rows per image id."""
        out = {}
        for q in self.queries:
            out.setdefault(q.image_id, set()).update(
                int(r) for r in q.proposal_rows)
        return {k: sorted(v) for k, v in out.items()}


def save_corpus_file(rows, path):
    """Write proposal/GT rows as TSV.

    Row tuple: (image_id, kind "P"|"G", phrase_id, x1, y1, x2, y2,
    feature_row_index or None).
    """
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            image_id, kind, phrase_id, x1, y1, x2, y2 = row[:7]
            cols = [image_id, kind, phrase_id,
                    repr(float(x1)), repr(float(y1)),
                    repr(float(x2)), repr(float(y2))]
            if len(row) > 7 and row[7] is not None:
                cols.append(str(int(row[7])))
            fh.write("\t".join(cols) + "\n")


def load_corpus_rows(path):
    """Parse the proposal/GT TSV back into row tuples."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (7, 8):
                raise FormatError(
                    f"{path}:{lineno}: expected 7 or 8 columns, got "
                    f"{len(parts)}"
                )
            image_id, kind, phrase_id = parts[0], parts[1], parts[2]
            if kind not in ("P", "G"):
                raise FormatError(
                    f"{path}:{lineno}: kind must be P or G, got {kind!r}"
                )
            try:
                coords = tuple(float(v) for v in parts[3:7])
                feat = int(parts[7]) if len(parts) == 8 else None
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            rows.append((image_id, kind, phrase_id) + coords + (feat,))
    return rows


def corpus_from_rows(rows, phrases, regions):
    """Group TSV rows into per-(image, phrase) queries.

    Args:
        rows: tuples as produced by load_corpus_rows.
        phrases: FeatureSet of phrase features (resolves phrase ids).
        regions: FeatureSet of region features (bounds feature rows).

    Returns:
        LocalizationCorpus.
    """
    grouped = {}
    order = []
    for row in rows:
        image_id, kind, phrase_id, x1, y1, x2, y2 = row[:7]
        feat = row[7] if len(row) > 7 else None
        if not (x2 > x1 and y2 > y1):
            raise ConsistencyError(
                f"query ({image_id}, {phrase_id}): box "
                f"({x1}, {y1}, {x2}, {y2}) has no area"
            )
        key = (image_id, phrase_id)
        if key not in grouped:
            grouped[key] = {"P": [], "G": []}
            order.append(key)
        if kind == "P" and feat is None:
            raise ConsistencyError(
                f"query ({image_id}, {phrase_id}): proposal without a "
                f"feature row"
            )
        if feat is not None and not (0 <= feat < regions.n):
            raise ConsistencyError(
                f"query ({image_id}, {phrase_id}): feature row {feat} "
                f"outside region set of {regions.n} rows"
            )
        grouped[key][kind].append(((x1, y1, x2, y2), feat))
    queries = []
    for image_id, phrase_id in order:
        bucket = grouped[(image_id, phrase_id)]
        if not bucket["P"]:
            raise ConsistencyError(
                f"query ({image_id}, {phrase_id}) has no proposals"
            )
        if len(bucket["P"]) > MAX_PROPOSALS_PER_QUERY:
            raise ConsistencyError(
                f"query ({image_id}, {phrase_id}) has "
                f"{len(bucket['P'])} proposals, limit is "
                f"{MAX_PROPOSALS_PER_QUERY}"
            )
        p_boxes = np.array([b for b, _ in bucket["P"]], dtype=np.float64)
        p_rows = np.array([f for _, f in bucket["P"]], dtype=np.int64)
        if bucket["G"]:
            g_boxes = np.array([b for b, _ in bucket["G"]], dtype=np.float64)
            g_rows = np.array(
                [-1 if f is None else f for _, f in bucket["G"]],
                dtype=np.int64,
            )
        else:
            g_boxes = np.zeros((0, 4), dtype=np.float64)
            g_rows = np.zeros((0,), dtype=np.int64)
        queries.append(LocalizationQuery(
            image_id=image_id,
            phrase_id=phrase_id,
            phrase_row=phrases.row_of(phrase_id),
            proposal_boxes=p_boxes,
            proposal_rows=p_rows,
            gt_boxes=g_boxes,
            gt_rows=g_rows,
        ))
    return LocalizationCorpus(queries=queries)


def load_corpus_file(path, phrases, regions):
    return corpus_from_rows(load_corpus_rows(path), phrases, regions)


# ---------------------------------------------------------------------------
# localization metrics


def query_distances(corpus, phrase_emb, region_emb, threads=1):
    """Per-query distances phrase -> each proposal.

    Args:
        corpus: LocalizationCorpus.
        phrase_emb: embedded phrase features, row-aligned with the
            phrase FeatureSet.
        region_emb: embedded region features, row-aligned with the
            region FeatureSet.

    Returns:
        list of (num_proposals,) arrays, one per query.
    """
    phrase_emb = as_matrix(phrase_emb, "phrase_emb")
    region_emb = as_matrix(region_emb, "region_emb")

    def one(q):
        diff = region_emb[q.proposal_rows] - phrase_emb[q.phrase_row]
        return np.sqrt((diff * diff).sum(axis=1))

    return _parallel_map(one, corpus.queries, threads)


def localization_recall_at_k(corpus, distances, k, iou_thresh=0.5):
    """Percentage of queries whose k nearest proposals hit a GT box.

    A proposal hits when its IoU with any of the query's GT boxes is
    at least iou_thresh.  Queries without GT boxes count as misses.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(distances) != len(corpus.queries):
        raise ConsistencyError(
            f"{len(distances)} distance vectors for "
            f"{len(corpus.queries)} queries"
        )
    hits = 0
    for q, dist in zip(corpus.queries, distances):
        if dist.shape[0] != q.proposal_boxes.shape[0]:
            raise ConsistencyError(
                f"query ({q.image_id}, {q.phrase_id}): {dist.shape[0]} "
                f"distances for {q.proposal_boxes.shape[0]} proposals"
            )
        if q.gt_boxes.shape[0] == 0:
            continue
        top = np.argsort(dist, kind="stable")[:k]
        found = False
        for p in top:
            if _iou_one_vs_many(q.proposal_boxes[p], q.gt_boxes).max() \
                    >= iou_thresh:
                found = True
                break
        if found:
            hits += 1
    if not corpus.queries:
        raise EvaluationError("corpus has no queries")
    return 100.0 * hits / len(corpus.queries)


def phrase_map(corpus, distances, nms_overlap=0.3, iou_thresh=0.5):
    """Average precision of box ranking per unique phrase, and mAP.

    Per query, proposals first pass greedy NMS at nms_overlap.  The
    survivors of all queries of a phrase are pooled and ranked by
    distance (ties by query order, then proposal index).  Walking down
    the ranking, a box is correct if its best-IoU unmatched GT box of
    its own query reaches iou_thresh; each GT box is consumed at most
    once.  AP is the mean of the precisions at the correct boxes, or 0
    with no correct box.  Phrases with no GT boxes anywhere are
    excluded and reported.

    Returns:
        (mAP, {phrase_id: AP}, [excluded phrase ids]).
    """
    if len(distances) != len(corpus.queries):
        raise ConsistencyError(
            f"{len(distances)} distance vectors for "
            f"{len(corpus.queries)} queries"
        )
    pooled = {}
    gt_count = {}
    for qi, (q, dist) in enumerate(zip(corpus.queries, distances)):
        keep = nms(q.proposal_boxes, dist, nms_overlap,
                   ascending_is_better=True)
        entries = pooled.setdefault(q.phrase_id, [])
        for p in keep:
            entries.append((float(dist[p]), qi, int(p)))
        gt_count[q.phrase_id] = (gt_count.get(q.phrase_id, 0)
                                 + q.gt_boxes.shape[0])
    per_phrase = {}
    skipped = []
    for phrase_id in corpus.unique_phrases():
        if gt_count.get(phrase_id, 0) == 0:
            skipped.append(phrase_id)
            continue
        ranked = sorted(pooled[phrase_id])
        consumed = {}
        precisions = []
        correct = 0
        for rank, (_, qi, p) in enumerate(ranked, start=1):
            q = corpus.queries[qi]
            if q.gt_boxes.shape[0] == 0:
                continue
            used = consumed.setdefault(qi, set())
            ious = _iou_one_vs_many(q.proposal_boxes[p], q.gt_boxes)
            best, best_iou = -1, 0.0
            for g in range(q.gt_boxes.shape[0]):
                if g in used:
                    continue
                if ious[g] > best_iou:
                    best, best_iou = g, float(ious[g])
            if best >= 0 and best_iou >= iou_thresh:
                used.add(best)
                correct += 1
                precisions.append(correct / rank)
        per_phrase[phrase_id] = (float(np.mean(precisions))
                                 if precisions else 0.0)
    if not per_phrase:
        raise EvaluationError("no phrase has ground-truth boxes")
    map_value = float(np.mean([per_phrase[p] for p in per_phrase]))
    return map_value, per_phrase, skipped


# ---------------------------------------------------------------------------
# weighted fusion


def weighted_distance(d_global, d_rp, alpha):
    """D = (1 - alpha) * global distance + alpha * region-phrase part."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * d_global + alpha * d_rp


def region_phrase_distance(phrase_emb_rows, region_emb_rows):
    """Mean over sentence phrases of the best-matching region distance.

    Args:
        phrase_emb_rows: (p, d) embedded phrases of one sentence.
        region_emb_rows: (r, d) embedded regions of one image.

    Returns:
        float, or None when the sentence has no phrases (callers fall
        back to the global distance).
    """
    phrase_emb_rows = np.asarray(phrase_emb_rows, dtype=np.float64)
    if phrase_emb_rows.size == 0:
        return None
    region_emb_rows = np.asarray(region_emb_rows, dtype=np.float64)
    if region_emb_rows.size == 0:
        raise EvaluationError("image has no regions to match phrases")
    d = pairwise_distances(as_matrix(phrase_emb_rows, "phrases"),
                           as_matrix(region_emb_rows, "regions"))
    return float(d.min(axis=1).mean())


def fused_distance_matrix(d_global, phrase_emb, region_emb,
                          region_rows_by_image, image_ids,
                          phrase_rows_by_sentence, alpha, threads=1):
    """Weighted fusion over a whole retrieval grid.

    Args:
        d_global: (num_images, num_sentences) global distances.
        phrase_emb, region_emb: embedded phrase/region features.
        region_rows_by_image: image id -> region feature rows.
        image_ids: row-aligned ids of d_global's image axis.
        phrase_rows_by_sentence: per-sentence list of phrase feature
            rows (empty list -> global fallback for that sentence).
        alpha: fusion weight in [0, 1].

    Returns:
        (num_images, num_sentences) fused matrix.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    d_global = as_matrix(d_global, "d_global")
    phrase_emb = as_matrix(phrase_emb, "phrase_emb")
    region_emb = as_matrix(region_emb, "region_emb")
    n_img, n_sent = d_global.shape
    if len(image_ids) != n_img:
        raise ConsistencyError(
            f"{len(image_ids)} image ids for {n_img} rows"
        )
    if len(phrase_rows_by_sentence) != n_sent:
        raise ConsistencyError(
            f"{len(phrase_rows_by_sentence)} phrase lists for "
            f"{n_sent} columns"
        )
    sentences_with_phrases = [
        j for j in range(n_sent) if phrase_rows_by_sentence[j]
    ]

    # Best-region distance per (image, phrase), NaN when the image has
    # no regions; reading a NaN for a phrase-bearing sentence is the
    # zero-region error case.
    def min_per_phrase(i):
        rows = region_rows_by_image.get(image_ids[i], [])
        if not rows:
            return np.full(phrase_emb.shape[0], np.nan)
        d = pairwise_distances(phrase_emb, region_emb[np.asarray(rows)])
        return d.min(axis=1)

    mins = _parallel_map(min_per_phrase, list(range(n_img)), threads)
    fused = d_global.copy()
    for i in range(n_img):
        m = mins[i]
        for j in sentences_with_phrases:
            rows = phrase_rows_by_sentence[j]
            vals = m[np.asarray(rows)]
            if np.isnan(vals).any():
                raise EvaluationError(
                    f"image {image_ids[i]!r} has no regions to match "
                    f"phrases"
                )
            d_rp = float(vals.mean())
            fused[i, j] = (1.0 - alpha) * d_global[i, j] + alpha * d_rp
    return fused


# ---------------------------------------------------------------------------
# reports


def write_report_csv(path, rows, config_lines=()):
    """CSV of (metric, direction, k, value) rows with a config echo.

    Floats are written with repr so re-runs are byte-comparable.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for line in config_lines:
            fh.write(f"# {line}\n")
        fh.write("metric,direction,k,value\n")
        for metric, direction, k, value in rows:
            if isinstance(value, float):
                value = repr(value)
            fh.write(f"{metric},{direction},{k},{value}\n")
