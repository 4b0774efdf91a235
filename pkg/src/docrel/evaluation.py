"""Micro-averaged relation metrics with slice breakdowns, plus the
attention-explanation export used by the `explain` command.

All scores compare (doc_id, head, tail, relation) tuples. Slices:

* ign_f1    — facts whose (head name, tail name, relation name) triple also
              appears in the training documents are removed from both the
              gold and predicted sets before scoring. Requires the training
              fact names; None when they were not supplied.
* intra_f1  — restricted to entity pairs that share at least one sentence.
* inter_f1  — restricted to pairs that never share a sentence.
* infer_f1  — restricted to (doc, head, tail) pairs owning at least one
              gold fact tagged as derived by reasoning; None when no
              document carries such tags.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import (CorpusError, Document, MarkedDocument, Vocabulary,
                     doc_order_mentions)


def micro_prf(n_correct: int, n_pred: int, n_gold: int):
    """(precision, recall, f1) with the 0/0 -> 0 convention."""
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def collect_fact_names(docs, relation_names) -> set:
    """Name triples (head name, tail name, relation name) of every gold fact.

    Entity names are each entity's canonical (lexicographically smallest)
    mention string, so the same real-world fact matches across documents
    even when entity indices differ.
    """
    facts = set()
    for doc in docs:
        for f in doc.labels:
            facts.add((doc.entity_name(f.head), doc.entity_name(f.tail),
                       relation_names[f.relation]))
    return facts


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    ign_f1: float | None
    intra_f1: float
    inter_f1: float
    infer_f1: float | None
    n_gold: int
    n_pred: int
    n_correct: int
    duplicates_dropped: int
    per_relation: dict

    def to_json(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ign_f1": self.ign_f1, "intra_f1": self.intra_f1,
            "inter_f1": self.inter_f1, "infer_f1": self.infer_f1,
            "n_gold": self.n_gold, "n_pred": self.n_pred,
            "n_correct": self.n_correct,
            "duplicates_dropped": self.duplicates_dropped,
            "per_relation": self.per_relation,
        }

    def format(self) -> str:
        def cell(v):
            return "   n/a" if v is None else f"{v:6.4f}"
        lines = [
            f"gold {self.n_gold}  predicted {self.n_pred}  correct {self.n_correct}",
            f"precision {cell(self.precision)}  recall {cell(self.recall)}  "
            f"f1 {cell(self.f1)}",
            f"ign_f1 {cell(self.ign_f1)}  intra_f1 {cell(self.intra_f1)}  "
            f"inter_f1 {cell(self.inter_f1)}  infer_f1 {cell(self.infer_f1)}",
        ]
        for name in sorted(self.per_relation):
            r = self.per_relation[name]
            lines.append(f"  {name}: f1 {r['f1']:.4f} "
                         f"(gold {r['gold']}, predicted {r['predicted']})")
        return "\n".join(lines)


def _score_subset(gold: set, pred: set, keep) -> tuple:
    g = {x for x in gold if keep(x)}
    p = {x for x in pred if keep(x)}
    return micro_prf(len(g & p), len(p), len(g))


def f1_scores(predictions, docs, relation_names, train_facts=None) -> EvalReport:
    """Score Prediction records against the documents' gold labels.

    `train_facts` is the output of `collect_fact_names` over the training
    split; when given, the report includes the score that ignores facts
    already stated there.
    """
    docs_by_id = {doc.doc_id: doc for doc in docs}

    pred = set()
    duplicates = 0
    for p in predictions:
        if p.doc_id not in docs_by_id:
            raise CorpusError(f"prediction references unknown document "
                              f"{p.doc_id!r}")
        key = (p.doc_id, p.head, p.tail, p.relation)
        if key in pred:
            duplicates += 1
        else:
            pred.add(key)
    if duplicates:
        warnings.warn(f"dropped {duplicates} duplicate prediction(s)",
                      stacklevel=2)

    gold = set()
    reasoning_pairs = set()   # (doc_id, head, tail) with a reasoning-tagged fact
    any_reasoning_tags = False
    for doc in docs:
        for f in doc.labels:
            gold.add((doc.doc_id, f.head, f.tail, f.relation))
            if f.is_reasoning:
                any_reasoning_tags = True
                reasoning_pairs.add((doc.doc_id, f.head, f.tail))

    n_correct = len(gold & pred)
    precision, recall, f1 = micro_prf(n_correct, len(pred), len(gold))

    def names(key):
        doc_id, h, t, r = key
        doc = docs_by_id[doc_id]
        return (doc.entity_name(h), doc.entity_name(t), relation_names[r])

    ign_f1 = None
    if train_facts is not None:
        ign_f1 = _score_subset(gold, pred,
                               lambda k: names(k) not in train_facts)[2]

    def intra(key):
        doc_id, h, t, _ = key
        return docs_by_id[doc_id].pair_shares_sentence(h, t)

    intra_f1 = _score_subset(gold, pred, intra)[2]
    inter_f1 = _score_subset(gold, pred, lambda k: not intra(k))[2]

    infer_f1 = None
    if any_reasoning_tags:
        infer_f1 = _score_subset(gold, pred,
                                 lambda k: k[:3] in reasoning_pairs)[2]

    per_relation = {}
    for r, name in enumerate(relation_names):
        g = sum(1 for k in gold if k[3] == r)
        p = sum(1 for k in pred if k[3] == r)
        c = sum(1 for k in gold & pred if k[3] == r)
        if g or p:
            pr, rc, f = micro_prf(c, p, g)
            per_relation[name] = {"precision": pr, "recall": rc, "f1": f,
                                  "gold": g, "predicted": p, "correct": c}

    return EvalReport(precision=precision, recall=recall, f1=f1,
                      ign_f1=ign_f1, intra_f1=intra_f1, inter_f1=inter_f1,
                      infer_f1=infer_f1, n_gold=len(gold), n_pred=len(pred),
                      n_correct=n_correct, duplicates_dropped=duplicates,
                      per_relation=per_relation)


# ---------------------------------------------------------------------------
# attention-explanation export


def heatmap_record(doc: Document, marked: MarkedDocument, vocab: Vocabulary,
                   head: int, tail: int, weights, top_k: int = 10) -> dict:
    """JSON-ready record of a pair's clue-attention weights over the marked
    token sequence, with the top-k positions annotated."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != len(marked.tokens):
        raise CorpusError(f"weight vector has length {weights.shape[0]}, "
                          f"document has {len(marked.tokens)} tokens")

    mention_words = set()
    for e in (head, tail):
        for m in doc.entities[e]:
            for off in range(m.start, m.end):
                mention_words.add((m.sentence_index, off))

    tokens = [vocab.id_to_token[t] for t in marked.tokens]
    ordered = doc_order_mentions(doc)

    def flags(pos):
        origin = marked.origins[pos]
        is_marker = origin[0] in ("start", "end")
        if is_marker:
            is_mention = ordered[origin[1]][0] in (head, tail)
        elif origin[0] == "tok":
            is_mention = (origin[1], origin[2]) in mention_words
        else:
            is_mention = False
        return {"is_marker": is_marker, "is_mention_token": bool(is_mention)}

    order = np.argsort(-weights, kind="stable")[:top_k]
    top = [{"position": int(pos), "token": tokens[pos],
            "weight": float(weights[pos]), **flags(int(pos))}
           for pos in order]
    return {
        "doc_id": doc.doc_id,
        "head": head, "tail": tail,
        "head_name": doc.entity_name(head),
        "tail_name": doc.entity_name(tail),
        "tokens": tokens,
        "weights": [float(w) for w in weights],
        "top": top,
    }
