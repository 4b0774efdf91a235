"""Trainable token encoder: embeddings plus bidirectional self-attention.

Produces one contextual vector per position of a marked document. Small by
design — the point of this codebase is the graph stage downstream — but it
is a real encoder: learned token and absolute position embeddings followed
by standard post-norm transformer layers. With zero layers it degenerates
to the embedding sum, which is occasionally useful as a control.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorlib as tl
from .attention import (AttentionHeadParams, ConfigError, FeedForwardParams,
                        LayerNormParams, MultiHeadAttentionParams, feed_forward,
                        init_attention, init_feed_forward, init_layer_norm,
                        multi_head_attention, residual_norm)


class OverlengthError(ValueError):
    """Marked document longer than the positional table."""


@dataclass
class EncoderLayerParams:
    attn: MultiHeadAttentionParams
    ffn: FeedForwardParams
    norm_attn: LayerNormParams
    norm_ffn: LayerNormParams


@dataclass
class EncoderParams:
    tok_emb: tl.Tensor   # (vocab, d_model)
    pos_emb: tl.Tensor   # (max_len, d_model)
    layers: list

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]

    @property
    def d_model(self) -> int:
        return self.tok_emb.shape[1]


def init_encoder(rng, vocab_size: int, d_model: int, n_layers: int,
                 n_heads: int, d_ff: int, max_len: int) -> EncoderParams:
    if n_layers < 0:
        raise ConfigError(f"encoder layer count must be >= 0, got {n_layers}")
    if n_layers > 0 and d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} encoder heads")
    layers = [EncoderLayerParams(attn=init_attention(rng, d_model, d_model, d_model, n_heads),
                                 ffn=init_feed_forward(rng, d_model, d_ff),
                                 norm_attn=init_layer_norm(d_model),
                                 norm_ffn=init_layer_norm(d_model))
              for _ in range(n_layers)]
    return EncoderParams(
        tok_emb=tl.Tensor(rng.normal(0.0, 0.02, size=(vocab_size, d_model)),
                          requires_grad=True),
        pos_emb=tl.Tensor(rng.normal(0.0, 0.02, size=(max_len, d_model)),
                          requires_grad=True),
        layers=layers)


def encode(params: EncoderParams, token_ids, dropout_rate: float = 0.0,
           training: bool = False, rng=None, capture=None):
    """Contextual embeddings for one token-id sequence; returns (len, d_model).

    Deterministic in inference mode (dropout off). Sequences longer than
    the positional table are rejected; re-window the document or build the
    encoder with a larger max_len.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ConfigError(f"token_ids must be a non-empty 1-d sequence, got shape {ids.shape}")
    if ids.size > params.max_len:
        raise OverlengthError(
            f"sequence of {ids.size} tokens exceeds the positional table "
            f"({params.max_len}); re-window the document or raise max_len")
    h = tl.add(tl.take_rows(params.tok_emb, ids),
               tl.take_rows(params.pos_emb, np.arange(ids.size)))
    for layer in params.layers:
        heads_out = [] if capture is not None else None
        attn = multi_head_attention(h, h, layer.attn, masks=None, capture=heads_out)
        if capture is not None:
            capture.append(heads_out)
        h = residual_norm(h, attn, layer.norm_attn, dropout_rate, training, rng)
        ff = feed_forward(h, layer.ffn)
        h = residual_norm(h, ff, layer.norm_ffn, dropout_rate, training, rng)
    return h
