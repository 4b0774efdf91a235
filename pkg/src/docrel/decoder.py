"""Graph decoder: masked self-attention over nodes + cross-attention to tokens.

Each layer runs three sub-layers in order, every one wrapped as
LayerNorm(x + Dropout(sublayer(x))):

1. structure-masked self-attention over the graph nodes — the heads are
   partitioned evenly across the six edge-type masks, so head h only sees
   the node pairs its mask allows;
2. cross-attention from the nodes into the token sequence H (no mask) —
   this is how nodes retrieve token-level clues the pooling step lost;
3. a position-wise feed-forward block.

Ablation switches: `disable_cross` skips sub-layer 2 entirely;
`plain_masks` replaces every structural mask with all-ones (ordinary
self-attention); `bypass` in run_decoder returns the input unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorlib as tl
from .attention import (ConfigError, FeedForwardParams, LayerNormParams,
                        MultiHeadAttentionParams, feed_forward, init_attention,
                        init_feed_forward, init_layer_norm,
                        multi_head_attention, residual_norm)
from .graph import N_EDGE_TYPES


@dataclass
class DecoderLayerParams:
    self_attn: MultiHeadAttentionParams
    cross_attn: MultiHeadAttentionParams
    ffn: FeedForwardParams
    norm_self: LayerNormParams
    norm_cross: LayerNormParams
    norm_ffn: LayerNormParams


@dataclass
class DecoderParams:
    layers: list

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def init_decoder(rng, d_model: int, n_layers: int, heads_per_edge: int,
                 cross_heads: int, d_ff: int) -> DecoderParams:
    if n_layers < 1:
        raise ConfigError(f"decoder needs at least one layer, got {n_layers} "
                          f"(use the bypass switch to skip the decoder)")
    if heads_per_edge < 1:
        raise ConfigError(f"heads_per_edge must be >= 1, got {heads_per_edge}")
    n_self = N_EDGE_TYPES * heads_per_edge
    if d_model % n_self != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_self} "
                          f"structural heads ({N_EDGE_TYPES} edge types x "
                          f"{heads_per_edge} heads each)")
    if d_model % cross_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {cross_heads} cross heads")
    layers = [DecoderLayerParams(
        self_attn=init_attention(rng, d_model, d_model, d_model, n_self),
        cross_attn=init_attention(rng, d_model, d_model, d_model, cross_heads),
        ffn=init_feed_forward(rng, d_model, d_ff),
        norm_self=init_layer_norm(d_model),
        norm_cross=init_layer_norm(d_model),
        norm_ffn=init_layer_norm(d_model))
        for _ in range(n_layers)]
    return DecoderParams(layers=layers)


def head_masks(graph_masks, heads_per_edge: int, plain: bool):
    """Per-head mask list: edge type t serves heads [t*k, (t+1)*k)."""
    if plain:
        n = graph_masks[0].shape[0]
        ones = np.ones((n, n))
        return [ones] * (N_EDGE_TYPES * heads_per_edge)
    out = []
    for mask in graph_masks:
        out.extend([mask] * heads_per_edge)
    return out


def run_layer(x, graph_masks, H, layer: DecoderLayerParams, *,
              heads_per_edge: int = 1, dropout_rate: float = 0.0,
              training: bool = False, rng=None, disable_cross: bool = False,
              plain_masks: bool = False, capture=None):
    """One decoder layer; `capture` (a dict) collects attention if given."""
    masks = head_masks(graph_masks, heads_per_edge, plain_masks)
    self_heads = [] if capture is not None else None
    attn = multi_head_attention(x, x, layer.self_attn, masks=masks,
                                capture=self_heads)
    x = residual_norm(x, attn, layer.norm_self, dropout_rate, training, rng)
    cross_heads = [] if capture is not None else None
    if not disable_cross:
        cross = multi_head_attention(x, H, layer.cross_attn, masks=None,
                                     capture=cross_heads)
        x = residual_norm(x, cross, layer.norm_cross, dropout_rate, training, rng)
    ff = feed_forward(x, layer.ffn)
    x = residual_norm(x, ff, layer.norm_ffn, dropout_rate, training, rng)
    if capture is not None:
        capture.setdefault("self", []).append(self_heads)
        capture.setdefault("cross", []).append(cross_heads)
    return x


def run_decoder(x, graph_masks, H, params: DecoderParams, *,
                heads_per_edge: int = 1, dropout_rate: float = 0.0,
                training: bool = False, rng=None, disable_cross: bool = False,
                plain_masks: bool = False, bypass: bool = False, capture=None):
    """Refine node features X into X'. With `bypass`, X' is X itself."""
    if bypass:
        return x
    if params.n_layers < 1:
        raise ConfigError("decoder has no layers and bypass is off")
    for layer in params.layers:
        x = run_layer(x, graph_masks, H, layer, heads_per_edge=heads_per_edge,
                      dropout_rate=dropout_rate, training=training, rng=rng,
                      disable_cross=disable_cross, plain_masks=plain_masks,
                      capture=capture)
    return x
