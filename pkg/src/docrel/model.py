"""Whole-model assembly: configuration, parameter tree, and document forward
passes (loss and prediction)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensorlib as tl
from .attention import ConfigError
from .corpus import Document, Vocabulary, mark_document
from .decoder import DecoderParams, init_decoder, run_decoder
from .encoder import EncoderParams, encode, init_encoder
from .graph import N_EDGE_TYPES, build_masks, node_index_maps, node_selector
from .head import (HeadParams, adaptive_threshold_loss, clue_attention, decide,
                   init_head, pair_logits, pool_entity)


@dataclass
class ModelConfig:
    d_model: int = 96
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_ff: int = 192
    max_len: int = 128
    decoder_layers: int = 2
    heads_per_edge: int = 1
    cross_heads: int = 6
    decoder_ff: int = 192
    d_z: int = 0              # 0 means "same as d_model"
    dropout: float = 0.1
    disable_cross: bool = False
    plain_masks: bool = False
    bypass_decoder: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n_self = N_EDGE_TYPES * self.heads_per_edge
        if self.d_model % n_self != 0:
            raise ConfigError(f"d_model {self.d_model} must be divisible by "
                              f"{n_self} structural heads")
        if self.encoder_layers > 0 and self.d_model % self.encoder_heads != 0:
            raise ConfigError(f"d_model {self.d_model} must be divisible by "
                              f"{self.encoder_heads} encoder heads")
        if self.d_model % self.cross_heads != 0:
            raise ConfigError(f"d_model {self.d_model} must be divisible by "
                              f"{self.cross_heads} cross heads")
        if not self.bypass_decoder and self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1 unless the decoder "
                              "is bypassed")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def effective_d_z(self) -> int:
        return self.d_z if self.d_z else self.d_model

    _INTS = ("d_model", "encoder_layers", "encoder_heads", "encoder_ff", "max_len",
             "decoder_layers", "heads_per_edge", "cross_heads", "decoder_ff", "d_z")
    _FLOATS = ("dropout",)
    _BOOLS = ("disable_cross", "plain_masks", "bypass_decoder")

    @classmethod
    def known_keys(cls):
        return set(cls._INTS) | set(cls._FLOATS) | set(cls._BOOLS)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ModelConfig":
        kwargs = {}
        for key, value in mapping.items():
            if key in cls._INTS:
                kwargs[key] = int(value)
            elif key in cls._FLOATS:
                kwargs[key] = float(value)
            elif key in cls._BOOLS:
                kwargs[key] = str(value).strip().lower() in ("1", "true", "yes", "on")
            else:
                raise ConfigError(f"unknown model-config key {key!r}")
        return cls(**kwargs)

    def to_meta(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(**meta)


@dataclass
class ModelParams:
    encoder: EncoderParams
    decoder: DecoderParams
    head: HeadParams


def init_model(seed: int, vocab: Vocabulary, cfg: ModelConfig) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    enc = init_encoder(rng, vocab.size, cfg.d_model, cfg.encoder_layers,
                       cfg.encoder_heads, cfg.encoder_ff, cfg.max_len)
    dec = init_decoder(rng, cfg.d_model, max(cfg.decoder_layers, 1),
                       cfg.heads_per_edge, cfg.cross_heads, cfg.decoder_ff)
    hd = init_head(rng, cfg.d_model, vocab.n_classes, cfg.effective_d_z)
    return ModelParams(encoder=enc, decoder=dec, head=hd)


def _walk(node, prefix: str):
    if isinstance(node, tl.Tensor):
        if node.requires_grad:
            yield prefix, node
    elif dataclasses.is_dataclass(node):
        for f in dataclasses.fields(node):
            yield from _walk(getattr(node, f.name), f"{prefix}.{f.name}")
    elif isinstance(node, (list, tuple)):
        for i, item in enumerate(node):
            yield from _walk(item, f"{prefix}.{i}")


def named_parameters(params: ModelParams):
    """Deterministically ordered (name, tensor) pairs for all trainables."""
    out = []
    out.extend(_walk(params.encoder, "encoder"))
    out.extend(_walk(params.decoder, "decoder"))
    out.extend(_walk(params.head, "head"))
    return out


def parameter_group(name: str) -> str:
    """Learning-rate group for a parameter name: encoder/decoder/classifier."""
    top = name.split(".", 1)[0]
    return {"encoder": "encoder", "decoder": "decoder", "head": "classifier"}[top]


# ---------------------------------------------------------------------------
# per-document preparation and forward passes


@dataclass(frozen=True)
class Prediction:
    doc_id: str
    head: int
    tail: int
    relation: int
    logit: float
    threshold_logit: float


@dataclass
class PreparedDoc:
    """Everything about a document that does not depend on parameters."""

    doc: Document
    marked: "object"
    maps: "object"
    selector: np.ndarray
    masks: list
    pairs: list                   # ordered (head, tail) entity pairs, h != t
    positives: dict               # (head, tail) -> sorted list of relation ids

    @property
    def doc_id(self) -> str:
        return self.doc.doc_id


def prepare_document(doc: Document, vocab: Vocabulary) -> PreparedDoc:
    marked = mark_document(doc, vocab)
    maps = node_index_maps(doc)
    selector = node_selector(marked, maps)
    masks = build_masks(maps)
    n = doc.n_entities
    pairs = [(h, t) for h in range(n) for t in range(n) if h != t]
    positives = {}
    for f in doc.labels:
        positives.setdefault((f.head, f.tail), []).append(f.relation)
    positives = {k: sorted(v) for k, v in positives.items()}
    return PreparedDoc(doc=doc, marked=marked, maps=maps, selector=selector,
                       masks=masks, pairs=pairs, positives=positives)


def document_states(prep: PreparedDoc, params: ModelParams, cfg: ModelConfig,
                    training: bool = False, rng=None, capture=None):
    """Run encoder + graph pooling + decoder; returns (H, X', pooled, h_doc)."""
    H = encode(params.encoder, prep.marked.tokens, dropout_rate=cfg.dropout,
               training=training, rng=rng)
    X = tl.matmul(tl.Tensor(prep.selector), H)
    Xp = run_decoder(X, prep.masks, H, params.decoder,
                     heads_per_edge=cfg.heads_per_edge, dropout_rate=cfg.dropout,
                     training=training, rng=rng, disable_cross=cfg.disable_cross,
                     plain_masks=cfg.plain_masks, bypass=cfg.bypass_decoder,
                     capture=capture)
    pooled = [pool_entity(Xp, rows) for rows in prep.maps.entity_rows]
    h_doc = tl.take_rows(Xp, [prep.maps.document_row])
    return H, Xp, pooled, h_doc


def document_loss(prep: PreparedDoc, params: ModelParams, cfg: ModelConfig,
                  vocab: Vocabulary, training: bool = True, rng=None):
    """Mean adaptive-threshold loss over all ordered pairs; None if no pairs."""
    if not prep.pairs:
        return None
    H, _, pooled, h_doc = document_states(prep, params, cfg, training=training,
                                          rng=rng)
    th = vocab.threshold_id
    losses = []
    for h, t in prep.pairs:
        clue, _ = clue_attention(H, pooled[h], pooled[t])
        logits = pair_logits(pooled[h], pooled[t], clue, h_doc, params.head)
        gold = prep.positives.get((h, t), ())
        losses.append(tl.reshape(adaptive_threshold_loss(logits, gold, th), (1,)))
    return tl.reduce_mean(tl.concat(losses, axis=0))


def predict_document(prep: PreparedDoc, params: ModelParams, cfg: ModelConfig,
                     vocab: Vocabulary, capture=None, want_clues: bool = False):
    """Score every ordered pair; returns (predictions, clue_weights).

    clue_weights maps (head, tail) -> token weight vector when requested
    (used by the explanation exporter); otherwise it is empty.
    """
    H, _, pooled, h_doc = document_states(prep, params, cfg, training=False,
                                          capture=capture)
    th = vocab.threshold_id
    predictions, clues = [], {}
    for h, t in prep.pairs:
        clue, joint = clue_attention(H, pooled[h], pooled[t])
        if want_clues:
            clues[(h, t)] = np.array(joint.data[0])
        logits = pair_logits(pooled[h], pooled[t], clue, h_doc, params.head)
        chosen = decide(logits, th)
        for r in sorted(chosen):
            predictions.append(Prediction(
                doc_id=prep.doc_id, head=h, tail=t, relation=r,
                logit=float(logits.data[r]),
                threshold_logit=float(logits.data[th])))
    return predictions, clues
