"""Hard-negative mining over a localization corpus, and fine-tuning.

A proposal is a hard negative for a phrase when the model scores it
closer than the phrase's closest ground-truth region while it overlaps
no ground-truth box of its own image at IoU >= 0.5.  Mined negatives
re-enter training as reserved region rows: they may only serve as
negatives for the phrase they were mined for, and fine-tuning drops
the structure-preserving terms entirely.
"""

import logging
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace

import numpy as np

from .errors import ConsistencyError, FormatError
from .evaluation import _iou_one_vs_many
from .network import forward_branch, learning_rate
from .training import train

log = logging.getLogger("twobranch")


@dataclass
class HardNegativeSet:
    """Per-phrase mined negatives: lists of (region_row, distance).

    Lists are sorted by (distance, row) ascending and hold at most
    ``cap`` entries each.
    """

    by_phrase: dict = field(default_factory=dict)
    cap: int = 50

    @property
    def total(self):
        return sum(len(v) for v in self.by_phrase.values())


def mine_hard_negatives(params, corpus, phrases, regions, cap=50,
                        iou_thresh=0.5):
    """Collect the closest qualifying proposals per unique phrase.

    Args:
        params: trained first-stage NetworkParams (x = regions,
            y = phrases).
        corpus: LocalizationCorpus.
        phrases, regions: the FeatureSets the corpus indexes into.
        cap: keep at most this many negatives per phrase.
        iou_thresh: overlap at or above this disqualifies a proposal
            (it localizes some ground truth too well).

    A phrase whose ground-truth boxes carry no feature rows has no
    distance reference and is skipped.

    Returns:
        (HardNegativeSet, skipped phrase ids).
    """
    region_emb, _ = forward_branch(params, "x", regions.features, "eval")
    phrase_emb, _ = forward_branch(params, "y", phrases.features, "eval")
    out = {}
    skipped = []
    for phrase_id in corpus.unique_phrases():
        queries = corpus.queries_of_phrase(phrase_id)
        gt_rows = sorted({
            int(r) for q in queries for r in q.gt_rows if int(r) >= 0
        })
        if not gt_rows:
            skipped.append(phrase_id)
            continue
        phrase_row = queries[0].phrase_row
        anchor = phrase_emb[phrase_row]
        gt_dists = np.linalg.norm(region_emb[gt_rows] - anchor, axis=1)
        threshold = float(gt_dists.min())
        candidates = {}
        for q in queries:
            prop_dists = np.linalg.norm(
                region_emb[q.proposal_rows] - anchor, axis=1)
            for p in range(q.proposal_rows.shape[0]):
                dist = float(prop_dists[p])
                if dist >= threshold:
                    continue
                if q.gt_boxes.shape[0] > 0:
                    overlap = _iou_one_vs_many(
                        q.proposal_boxes[p], q.gt_boxes).max()
                    if overlap >= iou_thresh:
                        continue
                row = int(q.proposal_rows[p])
                if row not in candidates or dist < candidates[row]:
                    candidates[row] = dist
        ranked = sorted(((d, r) for r, d in candidates.items()))[:cap]
        out[phrase_id] = [(r, d) for d, r in ranked]
    return HardNegativeSet(by_phrase=out, cap=cap), skipped


def save_hard_negatives(hn, path):
    """TSV: phrase_id, region row, distance; one line per negative."""
    with open(path, "w", encoding="utf-8") as fh:
        for phrase_id in sorted(hn.by_phrase):
            for row, dist in hn.by_phrase[phrase_id]:
                fh.write(f"{phrase_id}\t{row}\t{repr(float(dist))}\n")


def load_hard_negatives(path, cap=50):
    by_phrase = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected 3 columns, got {len(parts)}"
                )
            try:
                row = int(parts[1])
                dist = float(parts[2])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            by_phrase.setdefault(parts[0], []).append((row, dist))
    return HardNegativeSet(by_phrase=by_phrase, cap=cap)


def negatives_by_anchor_row(hn, phrase_features):
    """Map phrase feature rows to their mined region rows."""
    out = {}
    for phrase_id, entries in hn.by_phrase.items():
        out[phrase_features.row_of(phrase_id)] = [r for r, _ in entries]
    return out


def fine_tune(params, opt, graph, features_x, features_y, hn, loss_cfg,
              epochs, batch_pairs, augment, rng, negatives_per_anchor=10,
              on_epoch=None):
    """Continue training with ranking constraints only.

    The structure weights are forced to zero (with a warning if the
    caller passed nonzero ones) and the learning-rate schedule restarts
    from epoch 0.  Mined negatives join batches as reserved rows for
    their phrase whenever that phrase is sampled.

    Returns:
        list of EpochStats.
    """
    if loss_cfg.lambda2 != 0.0 or loss_cfg.lambda3 != 0.0:
        log.warning(
            "fine-tuning forces lambda2/lambda3 to 0 (was %g/%g)",
            loss_cfg.lambda2, loss_cfg.lambda3,
        )
        loss_cfg = dc_replace(loss_cfg, lambda2=0.0, lambda3=0.0)
    opt.epoch = 0
    opt.lr = learning_rate(0, opt.lr0)
    extra = negatives_by_anchor_row(hn, features_y)
    for row, rows in extra.items():
        for r in rows:
            if not 0 <= r < features_x.n:
                raise ConsistencyError(
                    f"hard negative region row {r} outside feature set of "
                    f"{features_x.n} rows"
                )
    return train(params, opt, graph, features_x, features_y, loss_cfg,
                 epochs, batch_pairs, augment, rng,
                 extra_negatives=extra,
                 negatives_per_anchor=negatives_per_anchor,
                 on_epoch=on_epoch)
