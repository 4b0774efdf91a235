"""Heterogeneous document graph: node features and structural edge masks.

Nodes, in one fixed order: every mention (reading order), then one node per
sentence, then a single whole-document node. Node features are pooled from
the encoder output: a mention uses the vector at its start marker, a
sentence the mean over its token range (markers included), the document
node the vector at position 0.

Six symmetric binary masks describe which node pairs may attend to each
other, one relation class per decoder head:

  0: mentions of the same entity,
  1: mentions of different entities that share a sentence,
  2: a mention and its own sentence node,
  3: adjacent sentence nodes,
  4: the document node and every sentence node,
  5: everything (fully connected).

Every mask includes all self-loops, so no attention row is ever empty, and
masks 0-4 are each a subset of mask 5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorlib as tl
from .corpus import Document, MarkedDocument, doc_order_mentions

N_EDGE_TYPES = 6


@dataclass
class NodeIndexMaps:
    """Row bookkeeping for the node matrix."""

    mention_entities: list    # mention node -> entity index
    mention_sentences: list   # mention node -> sentence index
    entity_rows: list         # entity index -> [mention node rows]
    n_sentences: int

    @property
    def n_mentions(self) -> int:
        return len(self.mention_entities)

    @property
    def n_nodes(self) -> int:
        return self.n_mentions + self.n_sentences + 1

    def sentence_row(self, s: int) -> int:
        return self.n_mentions + s

    @property
    def document_row(self) -> int:
        return self.n_mentions + self.n_sentences

    def node_kinds(self) -> list:
        return (["mention"] * self.n_mentions
                + ["sentence"] * self.n_sentences
                + ["document"])


def node_index_maps(doc: Document) -> NodeIndexMaps:
    ordered = doc_order_mentions(doc)
    entity_rows = [[] for _ in doc.entities]
    mention_entities, mention_sentences = [], []
    for row, (e, m) in enumerate(ordered):
        mention_entities.append(e)
        mention_sentences.append(m.sentence_index)
        entity_rows[e].append(row)
    return NodeIndexMaps(mention_entities=mention_entities,
                         mention_sentences=mention_sentences,
                         entity_rows=entity_rows,
                         n_sentences=doc.n_sentences)


def node_selector(marked: MarkedDocument, maps: NodeIndexMaps) -> np.ndarray:
    """The constant (n_nodes, n_tokens) pooling matrix P with X = P @ H.

    Mention and document rows are one-hot picks; sentence rows average
    their token range uniformly.
    """
    n_tok = marked.n_tokens
    P = np.zeros((maps.n_nodes, n_tok))
    for i, pos in enumerate(marked.mention_start_positions):
        P[i, pos] = 1.0
    for s, (a, b) in enumerate(marked.sentence_token_ranges):
        P[maps.sentence_row(s), a:b] = 1.0 / (b - a)
    P[maps.document_row, marked.cls_position] = 1.0
    return P


def build_nodes(doc: Document, marked: MarkedDocument, H):
    """Pool encoder output H into the node feature matrix X.

    Returns (X, maps). X participates in the gradient tape through H.
    """
    maps = node_index_maps(doc)
    X = tl.matmul(tl.Tensor(node_selector(marked, maps)), H)
    return X, maps


def build_masks(maps: NodeIndexMaps) -> list:
    """The six (n_nodes, n_nodes) binary masks described in the module docstring."""
    n = maps.n_nodes
    m = maps.n_mentions
    eye = np.eye(n)
    masks = [eye.copy() for _ in range(N_EDGE_TYPES - 1)]
    ents = np.asarray(maps.mention_entities)
    sents = np.asarray(maps.mention_sentences)
    if m:
        same_entity = ents[:, None] == ents[None, :]
        same_sentence = sents[:, None] == sents[None, :]
        masks[0][:m, :m] = np.maximum(masks[0][:m, :m], same_entity)
        masks[1][:m, :m] = np.maximum(masks[1][:m, :m],
                                      same_sentence & ~same_entity)
        for row, s in enumerate(maps.mention_sentences):
            masks[2][row, maps.sentence_row(s)] = 1.0
            masks[2][maps.sentence_row(s), row] = 1.0
    for s in range(maps.n_sentences - 1):
        a, b = maps.sentence_row(s), maps.sentence_row(s + 1)
        masks[3][a, b] = masks[3][b, a] = 1.0
    for s in range(maps.n_sentences):
        masks[4][maps.document_row, maps.sentence_row(s)] = 1.0
        masks[4][maps.sentence_row(s), maps.document_row] = 1.0
    masks.append(np.ones((n, n)))
    return masks


def dump_text(maps: NodeIndexMaps, masks) -> str:
    """Serialize node kinds and masks as a stable text block (for goldens)."""
    lines = ["nodes: " + " ".join(
        f"{k}{i}" for i, k in enumerate(maps.node_kinds()))]
    for t, mask in enumerate(masks):
        lines.append(f"mask {t}:")
        for row in mask:
            lines.append("".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
