"""Pair classification head: entity pooling, clue attention, bilinear scoring,
and the adaptive-threshold loss.

An entity is pooled from its mention nodes with logsumexp (a smooth max, so
every mention contributes but strong ones dominate). For each ordered pair,
token-level attention distributions for the two entities are multiplied and
renormalized into one joint distribution over tokens; the resulting clue
vector summarizes the tokens both entities care about. Subject/object
representations then combine entity, clue, and document vectors, and a
per-relation bilinear form scores the pair.

Scores are calibrated against a learned threshold pseudo-class: relations
scoring above it are predicted, and the empty set means "no relation". The
loss pushes each gold relation above the threshold (one binary term per
positive) and the threshold above every negative (one term over the pool).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorlib as tl
from .attention import ConfigError


@dataclass
class HeadParams:
    w_subj: tl.Tensor   # (d_z, 3 * d_model)
    w_obj: tl.Tensor    # (d_z, 3 * d_model)
    w_bil: tl.Tensor    # (n_classes, d_z, d_z)
    b_cls: tl.Tensor    # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.w_bil.shape[0]

    @property
    def d_z(self) -> int:
        return self.w_bil.shape[1]


def init_head(rng, d_model: int, n_classes: int, d_z: int | None = None) -> HeadParams:
    if n_classes < 1:
        raise ConfigError(f"need at least the threshold class, got {n_classes}")
    d_z = d_model if d_z is None else d_z
    s_in = 1.0 / np.sqrt(3.0 * d_model)
    s_bil = 1.0 / np.sqrt(d_z)
    return HeadParams(
        w_subj=tl.Tensor(rng.normal(0.0, s_in, size=(d_z, 3 * d_model)),
                         requires_grad=True),
        w_obj=tl.Tensor(rng.normal(0.0, s_in, size=(d_z, 3 * d_model)),
                        requires_grad=True),
        w_bil=tl.Tensor(rng.normal(0.0, s_bil, size=(n_classes, d_z, d_z)),
                        requires_grad=True),
        b_cls=tl.Tensor(np.zeros(n_classes), requires_grad=True))


def pool_entity(nodes, rows):
    """Smooth-max pooling of mention node rows: logsumexp over the rows.

    Returns a (1, d) tensor. An entity with no mentions is a data error and
    is rejected (the reduction would be empty).
    """
    if len(rows) == 0:
        raise tl.ShapeError("cannot pool an entity with no mention rows")
    return tl.logsumexp(tl.take_rows(nodes, rows), axis=0, keepdims=True)


def clue_attention(H, h_subj, h_obj):
    """Joint token attention for a pair; returns (clue (1, d), weights (1, l)).

    Each entity vector scores every token by dot product; the two softmax
    distributions are multiplied elementwise and renormalized, so only
    tokens relevant to both entities keep weight. The clue vector is the
    weighted sum of token embeddings.
    """
    a_subj = tl.softmax(tl.transpose(tl.matmul(H, tl.transpose(h_subj))))  # (1, l)
    a_obj = tl.softmax(tl.transpose(tl.matmul(H, tl.transpose(h_obj))))    # (1, l)
    joint = tl.softmax(tl.mul(a_subj, a_obj))                              # (1, l)
    return tl.matmul(joint, H), joint


def pair_logits(h_subj, h_obj, clue, h_doc, params: HeadParams):
    """Bilinear relation scores for one ordered pair; returns (n_classes,)."""
    subj_in = tl.concat([h_subj, clue, h_doc], axis=1)        # (1, 3d)
    obj_in = tl.concat([h_obj, clue, h_doc], axis=1)          # (1, 3d)
    z_subj = tl.tanh(tl.matmul(subj_in, tl.transpose(params.w_subj)))  # (1, d_z)
    z_obj = tl.tanh(tl.matmul(obj_in, tl.transpose(params.w_obj)))     # (1, d_z)
    n_cls, d_z = params.n_classes, params.d_z
    flat = tl.reshape(params.w_bil, (n_cls * d_z, d_z))
    mixed = tl.reshape(tl.matmul(flat, tl.transpose(z_obj)), (n_cls, d_z))
    scores = tl.matmul(mixed, tl.transpose(z_subj))            # (n_cls, 1)
    return tl.add(tl.reshape(scores, (n_cls,)), params.b_cls)


def adaptive_threshold_loss(logits, positives, threshold_id: int):
    """Loss for one pair: positives vs the threshold, threshold vs negatives.

    For each gold relation r, a two-way softmax term asks logit_r to beat
    the threshold logit; one further term asks the threshold to beat the
    pool of all non-gold relations. Returns a scalar tensor.
    """
    positives = sorted(set(positives))
    n_cls = logits.shape[0]
    if threshold_id in positives:
        raise ValueError("the threshold pseudo-class cannot be a gold label")
    for p in positives:
        if not 0 <= p < n_cls:
            raise ValueError(f"positive class {p} out of range for {n_cls} classes")

    terms = []
    for p in positives:
        pair = tl.take_rows(logits, [p, threshold_id])
        win = tl.sub(tl.take_rows(logits, [p]),
                     tl.reshape(tl.logsumexp(pair, axis=0), (1,)))
        terms.append(win)
    negatives = [r for r in range(n_cls) if r != threshold_id and r not in positives]
    pool = tl.take_rows(logits, negatives + [threshold_id])
    th_win = tl.sub(tl.take_rows(logits, [threshold_id]),
                    tl.reshape(tl.logsumexp(pool, axis=0), (1,)))
    terms.append(th_win)
    return tl.reshape(tl.neg(tl.reduce_sum(tl.concat(terms, axis=0))), ())


def decide(logits, threshold_id: int) -> set:
    """Predicted relation ids: strictly above the threshold logit; {} = none."""
    values = logits.data if isinstance(logits, tl.Tensor) else np.asarray(logits)
    th = values[threshold_id]
    return {int(r) for r in range(len(values))
            if r != threshold_id and values[r] > th}
