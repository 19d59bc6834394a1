"""Epoch-driven SGD training over a correspondence graph.

One training step runs a single train-mode forward per branch, mines
triplets on those embeddings, computes the hinge loss, and applies one
momentum-SGD update.  Each constraint family is normalized by its own
mined-triplet count before the weighted combination, so a family's
force on the parameters does not depend on how many triplets the other
families happened to yield; the recorded loss is the same weighted
per-family mean.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .loss_mining import (FAMILY_NAMES, TripletSet, hinge_loss,
                          mine_triplets)
from .network import backward_and_step, forward_branch, learning_rate

log = logging.getLogger("twobranch")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    family_counts: dict
    batches: int
    skipped_batches: int


def train_step(params, opt, batch, features_x, features_y, loss_cfg, rng):
    """One forward/mine/loss/backward/update cycle.

    Returns:
        (weighted per-family mean loss, mined family counts) for the
        batch.
    """
    inp_x = features_x.features[batch.x_rows]
    inp_y = features_y.features[batch.y_rows]
    emb_x, tapes_x = forward_branch(params, "x", inp_x, "train", rng=rng)
    emb_y, tapes_y = forward_branch(params, "y", inp_y, "train", rng=rng)
    triplets = mine_triplets(emb_x, emb_y, batch, loss_cfg)
    counts = triplets.counts()
    if triplets.total == 0:
        return 0.0, counts
    loss = 0.0
    grad_x = np.zeros_like(emb_x)
    grad_y = np.zeros_like(emb_y)
    for name in FAMILY_NAMES:
        mined = getattr(triplets, name)
        if mined.shape[0] == 0:
            continue
        only = TripletSet()
        setattr(only, name, mined)
        part = hinge_loss(emb_x, emb_y, only, loss_cfg)
        scale = 1.0 / mined.shape[0]
        loss += part.loss * scale
        grad_x += part.grad_x * scale
        grad_y += part.grad_y * scale
    backward_and_step(params, opt, tapes_x, tapes_y, grad_x, grad_y)
    return loss, counts


def train(params, opt, graph, features_x, features_y, loss_cfg, epochs,
          batch_pairs, augment, rng, extra_negatives=None,
          negatives_per_anchor=10, on_epoch=None):
    """Run ``epochs`` epochs, each a disjoint partition of the pairs.

    Batches that end up with fewer than 2 rows in either view are
    skipped (batch statistics need 2 rows).  The schedule drops the
    learning rate tenfold every 10 epochs of ``opt.epoch``, which
    keeps counting across calls unless the caller resets it.

    Args:
        on_epoch: optional callback receiving each EpochStats, called
            after the epoch's parameters are in place (for best-model
            tracking).

    Returns:
        list of EpochStats.
    """
    history = []
    for _ in range(epochs):
        opt.lr = learning_rate(opt.epoch, opt.lr0)
        losses = []
        counts = {name: 0 for name in FAMILY_NAMES}
        skipped = 0
        for batch in data_mod.epoch_batches(
                graph, batch_pairs, augment, rng,
                extra_negatives=extra_negatives,
                negatives_per_anchor=negatives_per_anchor):
            if batch.num_x < 2 or batch.num_y < 2:
                skipped += 1
                continue
            loss, fam = train_step(params, opt, batch, features_x,
                                   features_y, loss_cfg, rng)
            losses.append(loss)
            for name in FAMILY_NAMES:
                counts[name] += fam[name]
        stats = EpochStats(
            epoch=opt.epoch,
            lr=opt.lr,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            family_counts=counts,
            batches=len(losses),
            skipped_batches=skipped,
        )
        history.append(stats)
        log.info(
            "epoch %d lr %.6g mean_loss %.6g triplets %s",
            stats.epoch, stats.lr, stats.mean_loss,
            {k: v for k, v in counts.items() if v},
        )
        if on_epoch is not None:
            on_epoch(stats)
        opt.epoch += 1
    return history
