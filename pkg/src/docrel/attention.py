"""Shared multi-head attention and feed-forward building blocks.

Both the token encoder and the graph decoder use these. Heads are stored
and computed separately (plain 2-d matmuls) so that per-head masks — the
decoder routes one structural edge type to each head — stay trivial to
apply and inspect.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorlib as tl


class ConfigError(ValueError):
    """Inconsistent model dimensions or flags."""


@dataclass
class AttentionHeadParams:
    wq: tl.Tensor  # (d_q, d_head)
    wk: tl.Tensor  # (d_kv, d_head)
    wv: tl.Tensor  # (d_kv, d_head)


@dataclass
class MultiHeadAttentionParams:
    heads: list
    wo: tl.Tensor  # (n_heads * d_head, d_model)

    @property
    def n_heads(self) -> int:
        return len(self.heads)


@dataclass
class FeedForwardParams:
    w1: tl.Tensor
    b1: tl.Tensor
    w2: tl.Tensor
    b2: tl.Tensor


@dataclass
class LayerNormParams:
    gain: tl.Tensor
    bias: tl.Tensor


def _weight(rng, fan_in: int, fan_out: int) -> tl.Tensor:
    scale = 1.0 / math.sqrt(fan_in)
    return tl.Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)),
                     requires_grad=True)


def init_attention(rng, d_query: int, d_kv: int, d_model: int,
                   n_heads: int) -> MultiHeadAttentionParams:
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    heads = [AttentionHeadParams(wq=_weight(rng, d_query, d_head),
                                 wk=_weight(rng, d_kv, d_head),
                                 wv=_weight(rng, d_kv, d_head))
             for _ in range(n_heads)]
    return MultiHeadAttentionParams(heads=heads, wo=_weight(rng, d_model, d_model))


def init_feed_forward(rng, d_model: int, d_ff: int) -> FeedForwardParams:
    return FeedForwardParams(
        w1=_weight(rng, d_model, d_ff),
        b1=tl.Tensor(np.zeros(d_ff), requires_grad=True),
        w2=_weight(rng, d_ff, d_model),
        b2=tl.Tensor(np.zeros(d_model), requires_grad=True))


def init_layer_norm(d_model: int) -> LayerNormParams:
    return LayerNormParams(gain=tl.Tensor(np.ones(d_model), requires_grad=True),
                           bias=tl.Tensor(np.zeros(d_model), requires_grad=True))


def multi_head_attention(q_src, kv_src, params: MultiHeadAttentionParams,
                         masks=None, capture=None):
    """Scaled dot-product attention; queries from q_src, keys/values from kv_src.

    `masks` is None (every position visible) or a per-head list whose entries
    are binary (n_q, n_kv) arrays or None. When `capture` is a list, each
    head's post-softmax attention matrix is appended to it as a plain array.
    """
    outs = []
    for i, head in enumerate(params.heads):
        q = tl.matmul(q_src, head.wq)                    # (n_q, d_head)
        k = tl.matmul(kv_src, head.wk)                   # (n_kv, d_head)
        v = tl.matmul(kv_src, head.wv)                   # (n_kv, d_head)
        scale = 1.0 / math.sqrt(head.wq.shape[1])
        scores = tl.mul(tl.matmul(q, tl.transpose(k)), scale)   # (n_q, n_kv)
        mask = None if masks is None else masks[i]
        probs = tl.masked_softmax(scores, mask)
        if capture is not None:
            capture.append(np.array(probs.data))
        outs.append(tl.matmul(probs, v))                 # (n_q, d_head)
    return tl.matmul(tl.concat(outs, axis=1), params.wo)


def feed_forward(x, params: FeedForwardParams):
    hidden = tl.relu(tl.add(tl.matmul(x, params.w1), params.b1))
    return tl.add(tl.matmul(hidden, params.w2), params.b2)


def residual_norm(x, sub_out, norm: LayerNormParams, dropout_rate: float,
                  training: bool, rng):
    """Post-norm sub-layer wrap: LayerNorm(x + Dropout(sublayer(x)))."""
    return tl.layer_norm(tl.add(x, tl.dropout(sub_out, dropout_rate, training, rng)),
                         norm.gain, norm.bias)
