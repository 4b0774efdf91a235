"""Corpus handling: data model, JSON IO, entity markers, vocabulary,
and a synthetic document generator with a planted rule base.

Documents follow the common document-level RE JSON schema: tokenized
sentences, a vertex set grouping coreferent mentions into entities, and
optional labeled relation facts between entity indices.

The synthetic generator plants facts from a typed relation catalogue and
derives additional gold facts two ways:

* compositional rules ``r1 ∘ r2 ⇒ r3`` chained to a fixpoint — the derived
  facts are tagged as reasoning facts and are inter-sentence by
  construction (every generated sentence carries at most two entities,
  and chain endpoints never share one);
* clue-gated relations — a planted pattern sentence only yields a gold
  fact when the relation's trigger word occurs elsewhere in the document.

Entities that appear more than once switch to an alias surface form
("belmar" → "the township") after their first mention, so bridging two
sentences requires the coreference structure, not string matching.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np


class CorpusError(ValueError):
    """Malformed corpus data; message names the document and field."""


class SchemaError(ValueError):
    """Invalid synthetic-corpus schema or configuration."""


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class Mention:
    sentence_index: int
    start: int              # token offset within the sentence
    end: int                # exclusive
    entity_type: str
    name: str

    @property
    def width(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class RelationFact:
    """A labeled (head entity, tail entity, relation id) triple.

    Equality and hashing use only the triple, so evidence and provenance
    flags never split or duplicate facts inside a set.
    """

    head: int
    tail: int
    relation: int
    evidence: tuple = field(default=(), compare=False)
    is_reasoning: bool = field(default=False, compare=False)
    is_inter_sentence: bool = field(default=False, compare=False)


@dataclass
class Document:
    doc_id: str
    sentences: list      # list[list[str]]
    entities: list       # list[list[Mention]]
    labels: set = field(default_factory=set)

    @property
    def n_sentences(self) -> int:
        return len(self.sentences)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def entity_sentences(self, e: int) -> set:
        return {m.sentence_index for m in self.entities[e]}

    def pair_shares_sentence(self, h: int, t: int) -> bool:
        return bool(self.entity_sentences(h) & self.entity_sentences(t))

    def entity_name(self, e: int) -> str:
        """Canonical surface form: lexicographically smallest mention name."""
        return min(m.name for m in self.entities[e])


def doc_order_mentions(doc: Document):
    """All mentions in reading order, as (entity_index, Mention) pairs.

    Order: sentence, then start offset, then wider span first; remaining
    ties fall back to entity index then the entity's own mention order.
    """
    entries = []
    for e, mentions in enumerate(doc.entities):
        for k, m in enumerate(mentions):
            entries.append((m.sentence_index, m.start, -m.width, e, k, m))
    entries.sort(key=lambda x: x[:5])
    return [(e, m) for _, _, _, e, k, m in entries]


def validate_document(doc: Document, n_relations: int | None = None) -> None:
    """Raise CorpusError on structural problems, naming the offending field."""
    where = f"document {doc.doc_id!r}"
    if not doc.sentences:
        raise CorpusError(f"{where}: empty sentence list")
    for e, mentions in enumerate(doc.entities):
        if not mentions:
            raise CorpusError(f"{where}: entity {e} has no mentions")
        for k, m in enumerate(mentions):
            at = f"{where}: entity {e} mention {k}"
            if not 0 <= m.sentence_index < len(doc.sentences):
                raise CorpusError(f"{at}: sentence index {m.sentence_index} out of range")
            sent_len = len(doc.sentences[m.sentence_index])
            if not 0 <= m.start < m.end:
                raise CorpusError(f"{at}: bad span [{m.start}, {m.end})")
            if m.end > sent_len:
                raise CorpusError(f"{at}: span [{m.start}, {m.end}) crosses the end of "
                                  f"sentence {m.sentence_index} (length {sent_len}); "
                                  f"cross-sentence mentions are not supported")
    for f in doc.labels:
        if not (0 <= f.head < doc.n_entities and 0 <= f.tail < doc.n_entities):
            raise CorpusError(f"{where}: label ({f.head}, {f.tail}, {f.relation}) "
                              f"references a missing entity")
        if f.head == f.tail:
            raise CorpusError(f"{where}: label relates entity {f.head} to itself")
        if n_relations is not None and not 0 <= f.relation < n_relations:
            raise CorpusError(f"{where}: relation id {f.relation} out of range")


# ---------------------------------------------------------------------------
# JSON IO


def _fact_from_record(doc: Document, rec: dict, rel_ids: dict, where: str) -> RelationFact:
    for key in ("h", "t", "r"):
        if key not in rec:
            raise CorpusError(f"{where}: label missing field {key!r}")
    r = rec["r"]
    if r not in rel_ids:
        raise CorpusError(f"{where}: unknown relation {r!r}; "
                          f"known: {sorted(rel_ids)}")
    return RelationFact(
        head=int(rec["h"]),
        tail=int(rec["t"]),
        relation=rel_ids[r],
        evidence=tuple(int(s) for s in rec.get("evidence", ())),
        is_reasoning=bool(rec.get("reasoning", False)),
        is_inter_sentence=not doc.pair_shares_sentence(int(rec["h"]), int(rec["t"])),
    )


def load_docred(path, relations: list | None = None):
    """Read a corpus file; returns (documents, relation_names).

    `relations` fixes the relation-name → id mapping (use the training
    inventory when loading dev/test). When omitted, the sorted set of
    relation codes found in the file defines it.
    """
    with open(path, "r", encoding="utf-8") as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise CorpusError(f"{path}: expected a JSON list of documents")

    if relations is None:
        seen = set()
        for rec in records:
            for lab in rec.get("labels", ()):
                if isinstance(lab, dict) and "r" in lab:
                    seen.add(str(lab["r"]))
        relations = sorted(seen)
    rel_ids = {r: i for i, r in enumerate(relations)}

    docs = []
    for i, rec in enumerate(records):
        where = f"document {i}"
        if not isinstance(rec, dict):
            raise CorpusError(f"{where}: record is not an object")
        try:
            title = str(rec["title"])
            sents = [[str(tok) for tok in sent] for sent in rec["sents"]]
            entities = []
            for e, group in enumerate(rec["vertexSet"]):
                mentions = []
                for k, m in enumerate(group):
                    at = f"{where}: vertexSet[{e}][{k}]"
                    try:
                        pos = m["pos"]
                        mentions.append(Mention(
                            sentence_index=int(m["sent_id"]),
                            start=int(pos[0]),
                            end=int(pos[1]),
                            entity_type=str(m["type"]),
                            name=str(m["name"]),
                        ))
                    except (KeyError, IndexError, TypeError, ValueError) as exc:
                        raise CorpusError(f"{at}: {exc!r}") from exc
                entities.append(mentions)
        except KeyError as exc:
            raise CorpusError(f"{where}: missing field {exc.args[0]!r}") from exc
        except TypeError as exc:
            raise CorpusError(f"{where}: {exc}") from exc

        doc = Document(doc_id=title, sentences=sents, entities=entities)
        labels = set()
        for j, lab in enumerate(rec.get("labels", ())):
            if not isinstance(lab, dict):
                raise CorpusError(f"{where}: labels[{j}] is not an object")
            labels.add(_fact_from_record(doc, lab, rel_ids, f"{where}: labels[{j}]"))
        doc.labels = labels
        validate_document(doc, n_relations=len(relations))
        docs.append(doc)
    return docs, list(relations)


def save_docred(docs, path, relations) -> None:
    """Write documents in the standard JSON schema (inverse of load_docred)."""
    records = []
    for doc in docs:
        vertex_set = [[{"name": m.name, "sent_id": m.sentence_index,
                        "pos": [m.start, m.end], "type": m.entity_type}
                       for m in mentions]
                      for mentions in doc.entities]
        labels = []
        for f in sorted(doc.labels, key=lambda f: (f.head, f.tail, f.relation)):
            rec = {"h": f.head, "t": f.tail, "r": relations[f.relation],
                   "evidence": list(f.evidence)}
            if f.is_reasoning:
                rec["reasoning"] = True
            labels.append(rec)
        records.append({"title": doc.doc_id, "sents": doc.sentences,
                        "vertexSet": vertex_set, "labels": labels})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token and relation inventories.

    Token ids: pad, document-start, unknown, then one start/end marker pair
    per entity type, then the corpus words. Relation ids: the real relations
    in the given order, with the adaptive-threshold pseudo-class appended
    last; an empty prediction set encodes "no relation".
    """

    PAD = "<pad>"
    DOC_START = "<doc>"
    UNK = "<unk>"
    THRESHOLD = "TH"

    def __init__(self, id_to_token: list, relations: list, entity_types: list):
        if self.THRESHOLD in relations:
            raise CorpusError(f"relation name {self.THRESHOLD!r} is reserved")
        if len(set(relations)) != len(relations):
            raise CorpusError("duplicate relation names")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.relations = list(relations)
        self.relation_to_id = {r: i for i, r in enumerate(self.relations)}
        self.entity_types = sorted(entity_types)
        self._marker_ids = {i for t, i in self.token_to_id.items()
                            if t.startswith("<") and t not in (self.PAD, self.UNK)
                            and t != self.DOC_START}

    # --- construction ---

    @staticmethod
    def marker_start(entity_type: str) -> str:
        return f"<{entity_type.lower()}>"

    @staticmethod
    def marker_end(entity_type: str) -> str:
        return f"</{entity_type.lower()}>"

    @classmethod
    def build(cls, docs, relation_names, min_freq: int = 1) -> "Vocabulary":
        """Assemble the vocabulary from a corpus and a relation inventory."""
        types = sorted({m.entity_type for d in docs for ms in d.entities for m in ms})
        counts = Counter(tok.lower() for d in docs for sent in d.sentences for tok in sent)
        words = sorted(w for w, c in counts.items() if c >= min_freq)
        tokens = [cls.PAD, cls.DOC_START, cls.UNK]
        for t in types:
            tokens.append(cls.marker_start(t))
            tokens.append(cls.marker_end(t))
        tokens.extend(words)
        return cls(tokens, list(relation_names), types)

    # --- token side ---

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[self.PAD]

    @property
    def doc_start_id(self) -> int:
        return self.token_to_id[self.DOC_START]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[self.UNK]

    def token_id(self, token: str) -> int:
        return self.token_to_id.get(token.lower(), self.unk_id)

    def start_marker_id(self, entity_type: str) -> int:
        key = self.marker_start(entity_type)
        if key not in self.token_to_id:
            raise CorpusError(f"entity type {entity_type!r} has no marker tokens; "
                              f"known types: {self.entity_types}")
        return self.token_to_id[key]

    def end_marker_id(self, entity_type: str) -> int:
        key = self.marker_end(entity_type)
        if key not in self.token_to_id:
            raise CorpusError(f"entity type {entity_type!r} has no marker tokens; "
                              f"known types: {self.entity_types}")
        return self.token_to_id[key]

    def is_marker_id(self, token_id: int) -> bool:
        return token_id in self._marker_ids

    # --- relation side ---

    @property
    def n_relations(self) -> int:
        """Real relations, excluding the threshold pseudo-class."""
        return len(self.relations)

    @property
    def threshold_id(self) -> int:
        return len(self.relations)

    @property
    def n_classes(self) -> int:
        """Real relations plus the threshold pseudo-class."""
        return len(self.relations) + 1

    def relation_id(self, name: str) -> int:
        if name not in self.relation_to_id:
            raise CorpusError(f"unknown relation {name!r}; known: {self.relations}")
        return self.relation_to_id[name]

    def relation_name(self, rid: int) -> str:
        if rid == self.threshold_id:
            return self.THRESHOLD
        return self.relations[rid]

    # --- persistence ---

    def to_meta(self) -> dict:
        return {"tokens": self.id_to_token, "relations": self.relations,
                "entity_types": self.entity_types}

    @classmethod
    def from_meta(cls, meta: dict) -> "Vocabulary":
        return cls(meta["tokens"], meta["relations"], meta["entity_types"])


# ---------------------------------------------------------------------------
# entity markers


@dataclass
class MarkedDocument:
    """A document flattened to one token-id sequence with entity markers.

    Position 0 is the document-start token. Each mention is wrapped in
    typed start/end markers; `mention_start_positions[i]` is the flat index
    of the start marker of the i-th mention in document order.
    `origins` records, per flat position, where the token came from:
    ("doc",), ("start", mention_i), ("end", mention_i), or
    ("tok", sentence, offset).
    """

    tokens: list
    mention_start_positions: list
    sentence_token_ranges: list
    origins: list
    cls_position: int = 0

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def mark_document(doc: Document, vocab: Vocabulary) -> MarkedDocument:
    """Insert typed mention markers and flatten the document.

    At a shared boundary, end markers are emitted before start markers;
    multiple mentions opening at the same offset open wider-span first
    (ties: entity index, then mention order) and close in reverse opening
    order, so marker pairs always nest properly.
    """
    validate_document(doc)
    ordered = doc_order_mentions(doc)

    starts_at = {}   # (sent, offset) -> [mention ids in opening order]
    ends_at = {}     # (sent, offset) -> [mention ids]
    for i, (_, m) in enumerate(ordered):
        starts_at.setdefault((m.sentence_index, m.start), []).append(i)
        ends_at.setdefault((m.sentence_index, m.end), []).append(i)

    tokens = [vocab.doc_start_id]
    origins = [("doc",)]
    mention_start_positions = [0] * len(ordered)
    ranges = []
    for s, sent in enumerate(doc.sentences):
        sent_begin = len(tokens)
        for offset in range(len(sent) + 1):
            closing = ends_at.get((s, offset), ())
            for i in sorted(closing, reverse=True):  # inner (later-opened) first
                tokens.append(vocab.end_marker_id(ordered[i][1].entity_type))
                origins.append(("end", i))
            for i in starts_at.get((s, offset), ()):  # already in opening order
                mention_start_positions[i] = len(tokens)
                tokens.append(vocab.start_marker_id(ordered[i][1].entity_type))
                origins.append(("start", i))
            if offset < len(sent):
                tokens.append(vocab.token_id(sent[offset]))
                origins.append(("tok", s, offset))
        ranges.append((sent_begin, len(tokens)))
    return MarkedDocument(tokens=tokens,
                          mention_start_positions=mention_start_positions,
                          sentence_token_ranges=ranges,
                          origins=origins)


# ---------------------------------------------------------------------------
# shared key=value config files


def parse_kv_file(path) -> dict:
    """Parse a plain `key = value` config file ('#' starts a comment)."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise SchemaError(f"{path}:{lineno}: empty key")
            out[key] = value.strip()
    return out


# ---------------------------------------------------------------------------
# synthetic world


# relation name -> (head type, tail type, pattern-sentence verb phrase)
RELATION_CATALOGUE = {
    "located_in": ("LOC", "LOC", ("lies", "in")),
    "based_in": ("ORG", "LOC", ("is", "based", "in")),
    "works_for": ("PER", "ORG", ("works", "for")),
    "lives_in": ("PER", "LOC", ("settled", "in")),
    "approved_by": ("ORG", "PER", ("filed", "a", "request", "with")),
    "allied_with": ("ORG", "ORG", ("met", "with")),
}

DEFAULT_TRIGGERS = {"approved_by": "approval", "allied_with": "treaty"}

_NAME_POOLS = {
    "PER": [("alice",), ("bram",), ("cora",), ("dev",), ("elio",), ("fern",),
            ("gus",), ("hana",), ("iris",), ("jules",), ("kenji",), ("lara",),
            ("milo",), ("nadia",), ("oren",), ("pia",), ("rosa",), ("sami",)],
    "ORG": [("acme",), ("boltworks",), ("carta",), ("driftline",), ("emberco",),
            ("forgeline",), ("galecorp",), ("harborline",), ("ionworks",), ("jettyco",),
            ("kodaline",), ("lumenco",), ("mastworks",), ("novaline",), ("opalco",),
            ("picoline",), ("quarryco",), ("ridgeline",)],
    "LOC": [("arden",), ("belmar",), ("corin",), ("drava",), ("esker",), ("farrow",),
            ("glenholm",), ("harrowgate",), ("inlet",), ("junovale",), ("karst",),
            ("lornmoor",), ("mesavale",), ("noria",), ("ormgate",), ("perthon",),
            ("new", "arden"), ("port", "belmar"), ("east", "corin"), ("lake", "drava")],
}

_ALIAS_POOLS = {
    "PER": ["envoy", "curator", "witness", "deputy", "analyst", "clerk",
            "warden", "scribe", "herald", "notary"],
    "ORG": ["firm", "bureau", "guild", "agency", "consortium", "collective",
            "venture", "syndicate", "outfit", "cooperative"],
    "LOC": ["township", "borough", "valley", "seaport", "hamlet", "province",
            "basin", "steppe", "crossing", "lowland"],
}

_DECOY_WORDS = ["audit", "gala", "festival", "briefing", "ledger", "parade"]

_FILLER_SENTENCES = [
    ("the", "season", "passed", "quietly", "."),
    ("markets", "stayed", "calm", "."),
    ("a", "quiet", "spell", "followed", "."),
    ("little", "else", "changed", "."),
]

_REPEAT_TAIL = ("drew", "notice", ".")

# Gate sentences embed the key word (trigger or decoy) in randomized filler so
# that no other token correlates with the label; a model must attend to the
# key token itself rather than a sentence-level aggregate.
_GATE_VERBS = ("recorded", "noted", "logged", "cited")
_GATE_PLACES = ("registry", "bulletin", "archive", "gazette")
_GATE_TIMES = ("monday", "spring", "noon", "autumn")
_GATE_FIXED = ("the", "was", "in", "before", ".", "at", "beside")

# Paired gate sentences (gate_swap mode) carry two key words: one announced
# as the sentence subject ("the W was ..."), one tucked into an oblique slot
# later in the sentence.  Fired and unfired documents use the same two words
# and the same word multiset; only which word is announced differs, so token
# presence and bag-of-words sentence summaries are uninformative and a reader
# must resolve which word occupies the announcement slot.  The oblique slot
# moves across tail variants to keep its position from becoming an anchor.
_GATE_TAILS = (
    ("in", "the", None, "before", "{time}", "."),
    ("before", "{time}", "in", "the", None, "."),
    ("at", "the", "{place}", "beside", "the", None, "."),
)

# Split patterns (split_patterns mode) state the candidate pair in two
# separate role sentences instead of one joint sentence: the head entity
# takes the petitioner role and the tail entity the deliberator role, so the
# gated fact is cross-sentence by construction and no single sentence ties
# the pair together.
_ROLE_HEAD_VERBS = ("petitioned", "applied")
_ROLE_TAIL_VERBS = ("deliberated", "convened")

# Inline gate sentences (gate_inline mode) fold the announcement frame and
# the candidate pair into one sentence: "the W was recorded when <head>
# <verb> <tail> in the W' ..." where W/W' are the trigger and a decoy, swapped
# between the announcement slot and the oblique slot exactly as in gate_swap.
# Both key words sit in the same sentence as both mentions, so the announced
# word is a first-class member of the pair's local context.
_INLINE_CONNECTIVES = ("when", "as", "after", "while")


@dataclass
class SynthConfig:
    """Knobs for the synthetic world; see configs/ for worked examples."""

    docs: int = 200
    dev_docs: int = 50
    min_sentences: int = 4
    max_sentences: int = 8
    min_entities: int = 3
    max_entities: int = 6
    relations: tuple = ("located_in", "based_in", "works_for", "approved_by")
    compose: tuple = (("located_in", "located_in", "located_in"),
                      ("based_in", "located_in", "based_in"))
    gated: tuple = (("approved_by", "approval"),)
    chain_rate: float = 0.8        # probability a document plants a rule chain
    long_chain_rate: float = 0.25  # probability a planted chain has three hops
    parallel_chain_rate: float = 0.0  # probability a chain doc plants a second chain
    broken_chain_rate: float = 0.3 # probability of a dangling one-hop distractor
    patterns_per_doc: int = 1      # clue-gated pattern sentences per document
    pattern_pool: int = 0          # 0 = any names; n = draw pattern entities
                                   # from the first n names of each type so the
                                   # same name pair recurs across documents
                                   # with conflicting gate outcomes
    gate_rate: float = 0.5         # probability a pattern's gate fires
    gate_swap: bool = False        # when true, unfired pattern documents still
                                   # contain the trigger, demoted to an oblique
                                   # slot while a decoy is announced in its
                                   # place; presence alone then separates
                                   # nothing and only the announcement counts
    split_patterns: bool = False   # when true, the candidate pair is stated
                                   # in two separate role sentences (head
                                   # petitions, tail deliberates) instead of
                                   # one joint sentence, so gated facts are
                                   # cross-sentence by construction
    gate_inline: bool = False      # when true, the announcement frame and the
                                   # candidate pair share one sentence; the
                                   # trigger/decoy swap discipline of
                                   # gate_swap applies within that sentence
    simple_rate: float = 0.5       # probability of one extra stand-alone fact
    repeat_rate: float = 0.5       # per planted entity: extra alias mention

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.docs < 1 or self.dev_docs < 0:
            raise SchemaError("docs must be >= 1 and dev_docs >= 0")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise SchemaError("need 1 <= min_sentences <= max_sentences")
        if not 2 <= self.min_entities <= self.max_entities:
            raise SchemaError("need 2 <= min_entities <= max_entities")
        if not self.relations:
            raise SchemaError("empty relation list")
        for r in self.relations:
            if r not in RELATION_CATALOGUE:
                raise SchemaError(f"unknown relation {r!r}; "
                                  f"catalogue: {sorted(RELATION_CATALOGUE)}")
        if len(set(self.relations)) != len(self.relations):
            raise SchemaError("duplicate relation names")
        for rule in self.compose:
            if len(rule) != 3:
                raise SchemaError(f"compose rule must have three relations, got {rule!r}")
            r1, r2, r3 = rule
            for r in rule:
                if r not in self.relations:
                    raise SchemaError(f"compose rule {rule!r} references {r!r}, "
                                      f"which is not in the relation list")
            h1, t1, _ = RELATION_CATALOGUE[r1]
            h2, t2, _ = RELATION_CATALOGUE[r2]
            h3, t3, _ = RELATION_CATALOGUE[r3]
            if t1 != h2 or h3 != h1 or t3 != t2:
                raise SchemaError(f"compose rule {rule!r} is not type-consistent: "
                                  f"{r1}:{(h1, t1)} ∘ {r2}:{(h2, t2)} => {r3}:{(h3, t3)}")
        if not self.compose:
            raise SchemaError("schema needs at least one compose rule")
        if not self.gated:
            raise SchemaError("schema needs at least one clue-gated relation")
        reserved = ({w for words in _NAME_POOLS.values() for name in words for w in name}
                    | {w for ws in _ALIAS_POOLS.values() for w in ws}
                    | set(_DECOY_WORDS)
                    | {w for s in _FILLER_SENTENCES for w in s}
                    | {w for _, _, tpl in RELATION_CATALOGUE.values() for w in tpl}
                    | set(_REPEAT_TAIL) | set(_GATE_VERBS) | set(_GATE_PLACES)
                    | set(_GATE_TIMES) | set(_GATE_FIXED)
                    | set(_ROLE_HEAD_VERBS) | set(_ROLE_TAIL_VERBS)
                    | set(_INLINE_CONNECTIVES))
        seen_triggers = set()
        for item in self.gated:
            if len(item) != 2:
                raise SchemaError(f"gated entry must be (relation, trigger), got {item!r}")
            rel, trig = item
            if rel not in self.relations:
                raise SchemaError(f"gated relation {rel!r} is not in the relation list")
            if not trig or " " in trig:
                raise SchemaError(f"trigger must be a single word, got {trig!r}")
            if trig in reserved:
                raise SchemaError(f"trigger {trig!r} collides with a template/name word")
            if trig in seen_triggers:
                raise SchemaError(f"trigger {trig!r} used for two relations")
            seen_triggers.add(trig)
        gated_rels = {rel for rel, _ in self.gated}
        for rule in self.compose:
            if set(rule) & gated_rels:
                raise SchemaError(f"compose rule {rule!r} uses a clue-gated relation; "
                                  f"gated facts do not chain")
        if self.pattern_pool < 0:
            raise SchemaError("pattern_pool must be >= 0")
        if self.pattern_pool and self.pattern_pool < 2 * self.patterns_per_doc:
            raise SchemaError(f"pattern_pool {self.pattern_pool} cannot cover "
                              f"{self.patterns_per_doc} patterns per document "
                              f"(needs at least 2 names per pattern)")
        if self.split_patterns and self.patterns_per_doc > len(self.gated):
            raise SchemaError("split_patterns allows at most one pattern per "
                              "gated relation per document; a second pattern "
                              "of the same relation would make the role "
                              "pairing ambiguous")
        if self.gate_inline and self.split_patterns:
            raise SchemaError("gate_inline and split_patterns are exclusive: "
                              "one folds the pair into the gate sentence, the "
                              "other spreads it over two sentences")

    @property
    def gated_map(self) -> dict:
        return dict(self.gated)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthConfig":
        kwargs = {}
        ints = {"docs", "dev_docs", "min_sentences", "max_sentences",
                "min_entities", "max_entities", "patterns_per_doc",
                "pattern_pool"}
        floats = {"chain_rate", "long_chain_rate", "parallel_chain_rate",
                  "broken_chain_rate", "gate_rate", "simple_rate", "repeat_rate"}
        bools = {"gate_swap", "split_patterns", "gate_inline"}
        for key, value in mapping.items():
            if key in ints:
                kwargs[key] = int(value)
            elif key in floats:
                kwargs[key] = float(value)
            elif key in bools:
                kwargs[key] = str(value).strip().lower() in ("1", "true", "yes", "on")
            elif key == "relations":
                kwargs[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key == "compose":
                rules = []
                for chunk in value.split(";"):
                    chunk = chunk.strip()
                    if not chunk:
                        continue
                    if "->" not in chunk:
                        raise SchemaError(f"compose rule {chunk!r} needs 'r1 + r2 -> r3'")
                    lhs, r3 = chunk.split("->", 1)
                    parts = [p.strip() for p in lhs.split("+")]
                    if len(parts) != 2:
                        raise SchemaError(f"compose rule {chunk!r} needs exactly two "
                                          f"relations on the left")
                    rules.append((parts[0], parts[1], r3.strip()))
                kwargs[key] = tuple(rules)
            elif key == "gated":
                pairs = []
                for chunk in value.split(","):
                    chunk = chunk.strip()
                    if not chunk:
                        continue
                    if ":" not in chunk:
                        raise SchemaError(f"gated entry {chunk!r} needs 'relation : trigger'")
                    rel, trig = chunk.split(":", 1)
                    pairs.append((rel.strip(), trig.strip()))
                kwargs[key] = tuple(pairs)
            else:
                raise SchemaError(f"unknown synthetic-config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_mapping(parse_kv_file(path))


def trigger_announced(sentences, trigger: str) -> bool:
    """True when the trigger word is announced: it appears immediately before
    "was", as in the gate frame "the <trigger> was recorded ...".  A trigger
    parked in an oblique slot of a paired gate sentence is merely mentioned
    and does not announce, so the gated fact stays absent."""
    return any(tok == trigger and i + 1 < len(sent) and sent[i + 1] == "was"
               for sent in sentences for i, tok in enumerate(sent))


def compose_closure(facts: set, rules) -> set:
    """Forward-chain (h, r, t) triples over r1 ∘ r2 ⇒ r3 rules to a fixpoint.

    Input facts map to themselves; derived facts carry evidence equal to the
    union of their parents' evidence. Returns the full closed set of
    RelationFact objects with derived ones tagged `is_reasoning`.
    """
    by_triple = {(f.head, f.tail, f.relation): f for f in facts}
    changed = True
    while changed:
        changed = False
        current = list(by_triple.values())
        for r1, r2, r3 in rules:
            lefts = [f for f in current if f.relation == r1]
            rights = [f for f in current if f.relation == r2]
            for a in lefts:
                for b in rights:
                    if a.tail != b.head or a.head == b.tail:
                        continue
                    key = (a.head, b.tail, r3)
                    if key in by_triple:
                        continue
                    by_triple[key] = RelationFact(
                        head=a.head, tail=b.tail, relation=r3,
                        evidence=tuple(sorted(set(a.evidence) | set(b.evidence))),
                        is_reasoning=True)
                    changed = True
    return set(by_triple.values())


class _DocPlan:
    """Accumulates one document's entities and sentences before layout."""

    def __init__(self, cfg: SynthConfig, rng):
        self.cfg = cfg
        self.rng = rng
        self.entities = []        # (type, canonical tokens, alias tokens)
        self.mention_counts = []  # per entity
        self.sentences = []       # (tokens, [(entity, start, end), ...])
        self.base = []            # (h, relation name, t, sentence index)
        self.patterns = []        # (h, gated relation name, t, fired)
        self._names_used = {t: set() for t in _NAME_POOLS}
        self._aliases_used = {t: set() for t in _ALIAS_POOLS}

    def new_entity(self, etype: str, pool_limit: int = 0) -> int:
        pool = _NAME_POOLS[etype]
        n = min(pool_limit, len(pool)) if pool_limit else len(pool)
        free = [i for i in range(n) if i not in self._names_used[etype]]
        if not free:
            raise SchemaError(f"name pool for {etype} exhausted; lower max_entities")
        pick = int(self.rng.choice(free))
        self._names_used[etype].add(pick)
        apool = _ALIAS_POOLS[etype]
        afree = [i for i in range(len(apool)) if i not in self._aliases_used[etype]]
        if not afree:
            raise SchemaError(f"alias pool for {etype} exhausted; lower max_entities")
        a = int(self.rng.choice(afree))
        self._aliases_used[etype].add(a)
        self.entities.append((etype, tuple(pool[pick]), ("the", apool[a])))
        self.mention_counts.append(0)
        return len(self.entities) - 1

    def surface(self, e: int) -> tuple:
        """Canonical tokens for the first mention, alias form afterwards."""
        etype, canonical, alias = self.entities[e]
        return canonical if self.mention_counts[e] == 0 else alias

    def add_fact_sentence(self, h: int, rel: str, t: int) -> int:
        _, _, verb = RELATION_CATALOGUE[rel]
        h_tokens, t_tokens = self.surface(h), self.surface(t)
        tokens = [*h_tokens, *verb, *t_tokens, "."]
        spans = [(h, 0, len(h_tokens)),
                 (t, len(h_tokens) + len(verb), len(h_tokens) + len(verb) + len(t_tokens))]
        self.mention_counts[h] += 1
        self.mention_counts[t] += 1
        self.sentences.append((tokens, spans))
        return len(self.sentences) - 1

    def add_repeat_sentence(self, e: int) -> int:
        tokens_e = self.surface(e)
        tokens = [*tokens_e, *_REPEAT_TAIL]
        self.mention_counts[e] += 1
        self.sentences.append((tokens, [(e, 0, len(tokens_e))]))
        return len(self.sentences) - 1

    def add_plain_sentence(self, tokens) -> int:
        self.sentences.append((list(tokens), []))
        return len(self.sentences) - 1

    def add_gate_sentence(self, word: str) -> int:
        tokens = ["the", word, "was", str(self.rng.choice(_GATE_VERBS)),
                  "in", "the", str(self.rng.choice(_GATE_PLACES)),
                  "before", str(self.rng.choice(_GATE_TIMES)), "."]
        return self.add_plain_sentence(tokens)

    def add_role_sentence(self, e: int, verbs) -> int:
        tokens_e = self.surface(e)
        tokens = [*tokens_e, str(self.rng.choice(verbs)), "."]
        self.mention_counts[e] += 1
        self.sentences.append((tokens, [(e, 0, len(tokens_e))]))
        return len(self.sentences) - 1

    def add_paired_gate_sentence(self, announced: str, oblique: str) -> int:
        tail = _GATE_TAILS[int(self.rng.integers(len(_GATE_TAILS)))]
        tokens = ["the", announced, "was", str(self.rng.choice(_GATE_VERBS))]
        for slot in tail:
            if slot is None:
                tokens.append(oblique)
            elif slot == "{time}":
                tokens.append(str(self.rng.choice(_GATE_TIMES)))
            elif slot == "{place}":
                tokens.append(str(self.rng.choice(_GATE_PLACES)))
            else:
                tokens.append(slot)
        return self.add_plain_sentence(tokens)

    def add_inline_gate_sentence(self, announced: str, oblique: str,
                                 h: int, rel: str, t: int) -> int:
        """One sentence holding the announcement frame and the fact phrase:
        "the <announced> was <verb> <connective> <head> <rel-verb> <tail>
        <tail-slots incl. oblique> ."  Mention spans cover head and tail."""
        _, _, verb = RELATION_CATALOGUE[rel]
        h_tokens, t_tokens = self.surface(h), self.surface(t)
        tokens = ["the", announced, "was", str(self.rng.choice(_GATE_VERBS)),
                  str(self.rng.choice(_INLINE_CONNECTIVES)),
                  *h_tokens, *verb, *t_tokens]
        h_start = 5
        t_start = h_start + len(h_tokens) + len(verb)
        spans = [(h, h_start, h_start + len(h_tokens)),
                 (t, t_start, t_start + len(t_tokens))]
        tail = _GATE_TAILS[int(self.rng.integers(len(_GATE_TAILS)))]
        for slot in tail:
            if slot is None:
                tokens.append(oblique)
            elif slot == "{time}":
                tokens.append(str(self.rng.choice(_GATE_TIMES)))
            elif slot == "{place}":
                tokens.append(str(self.rng.choice(_GATE_PLACES)))
            else:
                tokens.append(slot)
        self.mention_counts[h] += 1
        self.mention_counts[t] += 1
        self.sentences.append((tokens, spans))
        return len(self.sentences) - 1


def _plan_document(cfg: SynthConfig, rng) -> _DocPlan:
    plan = _DocPlan(cfg, rng)
    budget = int(rng.integers(cfg.min_sentences, cfg.max_sentences + 1))
    ent_budget = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    gated = list(cfg.gated)

    def sentences_left():
        return budget - len(plan.sentences)

    def ents_left():
        return ent_budget - len(plan.entities)

    # clue-gated patterns: one pattern sentence plus one gate/decoy sentence.
    # The gate state is drawn once per relation so that every pattern of a
    # relation within a document agrees with the presence of its trigger.
    fired_by_rel = {}
    if cfg.gate_inline:
        sentences_per_pattern = 1
    elif cfg.split_patterns:
        sentences_per_pattern = 3
    else:
        sentences_per_pattern = 2
    for p in range(cfg.patterns_per_doc):
        rel, trigger = gated[p % len(gated)]
        h_type, t_type, _ = RELATION_CATALOGUE[rel]
        if sentences_left() < sentences_per_pattern or ents_left() < 2:
            break
        h = plan.new_entity(h_type, pool_limit=cfg.pattern_pool)
        t = plan.new_entity(t_type, pool_limit=cfg.pattern_pool)
        if rel not in fired_by_rel:
            fired_by_rel[rel] = bool(rng.random() < cfg.gate_rate)
        fired = fired_by_rel[rel]
        plan.patterns.append((h, rel, t, fired))
        if cfg.gate_inline:
            decoy = str(rng.choice(_DECOY_WORDS))
            announced, oblique = (trigger, decoy) if fired else (decoy, trigger)
            plan.add_inline_gate_sentence(announced, oblique, h, rel, t)
            continue
        if cfg.split_patterns:
            plan.add_role_sentence(h, _ROLE_HEAD_VERBS)
            plan.add_role_sentence(t, _ROLE_TAIL_VERBS)
        else:
            plan.add_fact_sentence(h, rel, t)
        if cfg.gate_swap:
            decoy = str(rng.choice(_DECOY_WORDS))
            announced, oblique = (trigger, decoy) if fired else (decoy, trigger)
            plan.add_paired_gate_sentence(announced, oblique)
        else:
            plan.add_gate_sentence(trigger if fired else str(rng.choice(_DECOY_WORDS)))

    # compositional chains, each bridge entity aliased at its second mention
    if cfg.compose and rng.random() < cfg.chain_rate:
        n_chains = 1 + int(rng.random() < cfg.parallel_chain_rate)
        for _ in range(n_chains):
            r1, r2, _ = cfg.compose[int(rng.integers(len(cfg.compose)))]
            h1_t, mid_t, tail_t = (RELATION_CATALOGUE[r1][0], RELATION_CATALOGUE[r2][0],
                                   RELATION_CATALOGUE[r2][1])
            hops = [(r1, h1_t, mid_t), (r2, mid_t, tail_t)]
            extend = (rng.random() < cfg.long_chain_rate
                      and any(ra == r2 and rb == r2 for ra, rb, _ in cfg.compose))
            if extend:
                hops.append((r2, tail_t, RELATION_CATALOGUE[r2][1]))
            if sentences_left() < len(hops) or ents_left() < len(hops) + 1:
                break
            nodes = [plan.new_entity(hops[0][1])]
            for rel, _, nxt_t in hops:
                nodes.append(plan.new_entity(nxt_t))
            for (rel, _, _), a, b in zip(hops, nodes, nodes[1:]):
                sent = plan.add_fact_sentence(a, rel, b)
                plan.base.append((a, rel, b, sent))

    # dangling one-hop distractor: same relation, no second hop
    if cfg.compose and rng.random() < cfg.broken_chain_rate:
        r1 = cfg.compose[int(rng.integers(len(cfg.compose)))][0]
        h_t, t_t, _ = RELATION_CATALOGUE[r1]
        if sentences_left() >= 1 and ents_left() >= 2:
            a, b = plan.new_entity(h_t), plan.new_entity(t_t)
            sent = plan.add_fact_sentence(a, r1, b)
            plan.base.append((a, r1, b, sent))

    # one stand-alone fact from the non-gated relations
    simple_rels = [r for r in cfg.relations if r not in cfg.gated_map]
    if simple_rels and rng.random() < cfg.simple_rate:
        rel = str(rng.choice(simple_rels))
        h_t, t_t, _ = RELATION_CATALOGUE[rel]
        if sentences_left() >= 1 and ents_left() >= 2:
            h, t = plan.new_entity(h_t), plan.new_entity(t_t)
            sent = plan.add_fact_sentence(h, rel, t)
            plan.base.append((h, rel, t, sent))

    # alias repeats give entities a second, lexically unrelated mention
    for e in range(len(plan.entities)):
        if sentences_left() <= 0:
            break
        if rng.random() < cfg.repeat_rate:
            plan.add_repeat_sentence(e)

    # top up the entity count with isolated single-mention entities
    while ents_left() > 0 and sentences_left() > 0:
        etype = str(rng.choice(sorted(_NAME_POOLS)))
        plan.add_repeat_sentence(plan.new_entity(etype))

    # pad with neutral filler up to the sentence budget
    while sentences_left() > 0:
        filler = _FILLER_SENTENCES[int(rng.integers(len(_FILLER_SENTENCES)))]
        plan.add_plain_sentence(filler)
    return plan


def _realize_document(plan: _DocPlan, cfg: SynthConfig, rel_ids: dict, doc_id: str, rng):
    """Shuffle sentences, build the Document, and derive the gold labels."""
    order = list(rng.permutation(len(plan.sentences)))
    new_index = {old: new for new, old in enumerate(order)}
    sentences = [list(plan.sentences[old][0]) for old in order]

    mentions_per_entity = [[] for _ in plan.entities]
    for old, (tokens, spans) in enumerate(plan.sentences):
        for e, start, end in spans:
            etype = plan.entities[e][0]
            mentions_per_entity[e].append(Mention(
                sentence_index=new_index[old], start=start, end=end,
                entity_type=etype, name=" ".join(tokens[start:end])))
    for ms in mentions_per_entity:
        ms.sort(key=lambda m: (m.sentence_index, m.start))

    doc = Document(doc_id=doc_id, sentences=sentences,
                   entities=mentions_per_entity)

    seeds = {RelationFact(h, t, rel_ids[rel], evidence=(new_index[sent],))
             for h, rel, t, sent in plan.base}
    for h, rel, t, fired in plan.patterns:
        if trigger_announced(sentences, cfg.gated_map[rel]):
            pattern_sent = next(m.sentence_index for m in mentions_per_entity[h])
            seeds.add(RelationFact(h, t, rel_ids[rel], evidence=(pattern_sent,)))
    rules_ids = [(rel_ids[a], rel_ids[b], rel_ids[c]) for a, b, c in cfg.compose]
    closed = compose_closure(seeds, rules_ids)
    doc.labels = {replace(f, is_inter_sentence=not doc.pair_shares_sentence(f.head, f.tail))
                  for f in closed}
    validate_document(doc, n_relations=len(rel_ids))
    return doc


def generate_synthetic(cfg: SynthConfig, seed: int, n_docs: int | None = None,
                       id_prefix: str = "synth"):
    """Generate a corpus; returns (documents, manifest).

    Deterministic for a fixed (config, seed, n_docs): the same call yields
    byte-identical serialized corpora. The manifest records the planted
    rule base and per-document seed facts so an external checker can
    re-derive every label.
    """
    rng = np.random.default_rng(seed)
    rel_ids = {r: i for i, r in enumerate(cfg.relations)}
    n = cfg.docs if n_docs is None else n_docs
    docs, doc_entries = [], []
    for i in range(n):
        plan = _plan_document(cfg, rng)
        doc = _realize_document(plan, cfg, rel_ids, f"{id_prefix}-{seed}-{i:04d}", rng)
        docs.append(doc)
        doc_entries.append({
            "doc_id": doc.doc_id,
            "base": [[h, rel, t] for h, rel, t, _ in plan.base],
            "patterns": [[h, rel, t] for h, rel, t, _ in plan.patterns],
        })
    manifest = {
        "seed": seed,
        "relations": list(cfg.relations),
        "compose": [list(r) for r in cfg.compose],
        "gated": {rel: trig for rel, trig in cfg.gated},
        "docs": doc_entries,
    }
    return docs, manifest
