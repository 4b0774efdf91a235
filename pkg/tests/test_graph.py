"""Graph tests: node pooling exactness and every edge mask checked against a
brute-force double-loop oracle written from first principles."""
import numpy as np

from docrel import corpus as C
from docrel import graph as G
from docrel import tensorlib as tl


def doc_two_sentences():
    """s0: "alice met acme .", s1: "the firm grew ." — e0 PER, e1 ORG (2 mentions)."""
    return C.Document(
        doc_id="g0",
        sentences=[["alice", "met", "acme", "."], ["the", "firm", "grew", "."]],
        entities=[
            [C.Mention(0, 0, 1, "PER", "alice")],
            [C.Mention(0, 2, 3, "ORG", "acme"), C.Mention(1, 0, 2, "ORG", "the firm")],
        ])


def oracle_edge_masks(doc):
    """Independent re-derivation: iterate all node pairs, test membership.

    Mentions are ordered by (sentence, start, wider-first, entity, mention)
    — restated here rather than imported so a bug in the library ordering
    cannot hide.
    """
    entries = []
    for e, ms in enumerate(doc.entities):
        for k, m in enumerate(ms):
            entries.append((m.sentence_index, m.start, -(m.end - m.start), e, k))
    entries.sort()
    ment_entity = [e for _, _, _, e, _ in entries]
    ment_sent = [s for s, _, _, _, _ in entries]
    M, S = len(entries), doc.n_sentences
    n = M + S + 1
    doc_node = M + S

    def kind(i):
        return "m" if i < M else ("s" if i < doc_node else "d")

    masks = [np.zeros((n, n)) for _ in range(6)]
    for i in range(n):
        for j in range(n):
            ki, kj = kind(i), kind(j)
            if i == j:
                for t in range(6):
                    masks[t][i, j] = 1.0
                continue
            if ki == "m" and kj == "m":
                if ment_entity[i] == ment_entity[j]:
                    masks[0][i, j] = 1.0
                elif ment_sent[i] == ment_sent[j]:
                    masks[1][i, j] = 1.0
            if ki == "m" and kj == "s" and ment_sent[i] == j - M:
                masks[2][i, j] = 1.0
            if ki == "s" and kj == "m" and ment_sent[j] == i - M:
                masks[2][i, j] = 1.0
            if ki == "s" and kj == "s" and abs(i - j) == 1:
                masks[3][i, j] = 1.0
            if (ki, kj) in (("d", "s"), ("s", "d")):
                masks[4][i, j] = 1.0
            masks[5][i, j] = 1.0
    return masks


def test_node_count_and_kinds():
    doc = doc_two_sentences()
    maps = G.node_index_maps(doc)
    assert maps.n_mentions == 3
    assert maps.n_sentences == 2
    assert maps.n_nodes == 6
    assert maps.node_kinds() == ["mention"] * 3 + ["sentence"] * 2 + ["document"]
    assert maps.entity_rows == [[0], [1, 2]]


def test_worked_two_sentence_masks():
    doc = doc_two_sentences()
    maps = G.node_index_maps(doc)
    masks = G.build_masks(maps)
    # nodes: 0=alice(s0) 1=acme(s0) 2=the-firm(s1) 3=sent0 4=sent1 5=doc
    e = np.eye(6)
    same_entity = e.copy(); same_entity[1, 2] = same_entity[2, 1] = 1
    co_sent = e.copy(); co_sent[0, 1] = co_sent[1, 0] = 1
    ment_sent = e.copy()
    ment_sent[0, 3] = ment_sent[3, 0] = 1
    ment_sent[1, 3] = ment_sent[3, 1] = 1
    ment_sent[2, 4] = ment_sent[4, 2] = 1
    adj = e.copy(); adj[3, 4] = adj[4, 3] = 1
    doc_sent = e.copy()
    doc_sent[5, 3] = doc_sent[3, 5] = 1
    doc_sent[5, 4] = doc_sent[4, 5] = 1
    expected = [same_entity, co_sent, ment_sent, adj, doc_sent, np.ones((6, 6))]
    for got, want in zip(masks, expected):
        assert np.array_equal(got, want)


def test_masks_match_double_loop_oracle_on_random_docs():
    cfg = C.SynthConfig(docs=30, dev_docs=0)
    for seed in (0, 1):
        docs, _ = C.generate_synthetic(cfg, seed=seed)
        for doc in docs:
            got = G.build_masks(G.node_index_maps(doc))
            want = oracle_edge_masks(doc)
            for t in range(6):
                assert np.array_equal(got[t], want[t]), f"mask {t} differs ({doc.doc_id})"


def test_mask_invariants_random_docs():
    cfg = C.SynthConfig(docs=20, dev_docs=0)
    docs, _ = C.generate_synthetic(cfg, seed=2)
    for doc in docs:
        masks = G.build_masks(G.node_index_maps(doc))
        full = masks[5]
        n = full.shape[0]
        assert np.array_equal(full, np.ones((n, n)))
        for m in masks:
            assert np.array_equal(m, m.T)                    # symmetric
            assert np.all(np.diag(m) == 1.0)                 # self-loops
            assert np.all((m == 0) | (m == 1))               # binary
            assert np.all(m <= full)                         # subset of full


def test_single_sentence_document_has_no_adjacency():
    doc = C.Document(doc_id="one", sentences=[["solo", "line"]],
                     entities=[[C.Mention(0, 0, 1, "PER", "solo")],
                               [C.Mention(0, 1, 2, "PER", "line")]])
    masks = G.build_masks(G.node_index_maps(doc))
    # mask 3 (adjacent sentences) collapses to the identity
    assert np.array_equal(masks[3], np.eye(4))


def test_node_features_pool_exactly():
    doc = doc_two_sentences()
    vocab = C.Vocabulary.build([doc], [])
    marked = C.mark_document(doc, vocab)
    rng = np.random.default_rng(4)
    H = tl.Tensor(rng.normal(size=(marked.n_tokens, 5)))
    X, maps = G.build_nodes(doc, marked, H)
    assert X.shape == (maps.n_nodes, 5)
    # mention rows are the exact start-marker rows of H
    for i, pos in enumerate(marked.mention_start_positions):
        assert np.array_equal(X.data[i], H.data[pos])
    # document row is exactly position 0
    assert np.array_equal(X.data[maps.document_row], H.data[marked.cls_position])
    # sentence rows match an independently computed mean to 1e-12
    for s, (a, b) in enumerate(marked.sentence_token_ranges):
        want = H.data[a:b].mean(axis=0)
        assert np.max(np.abs(X.data[maps.sentence_row(s)] - want)) < 1e-12


def test_single_token_sentence_node_equals_token_row():
    doc = C.Document(doc_id="tiny", sentences=[["hello"], ["again", "friend"]],
                     entities=[[C.Mention(1, 0, 1, "PER", "again")]])
    vocab = C.Vocabulary.build([doc], [])
    marked = C.mark_document(doc, vocab)
    H = tl.Tensor(np.random.default_rng(5).normal(size=(marked.n_tokens, 3)))
    X, maps = G.build_nodes(doc, marked, H)
    a, b = marked.sentence_token_ranges[0]
    assert b - a == 1
    assert np.array_equal(X.data[maps.sentence_row(0)], H.data[a])


def test_gradient_flows_through_node_pooling():
    doc = doc_two_sentences()
    vocab = C.Vocabulary.build([doc], [])
    marked = C.mark_document(doc, vocab)
    H = tl.Tensor(np.random.default_rng(6).normal(size=(marked.n_tokens, 4)),
                  requires_grad=True)
    with tl.Tape():
        X, maps = G.build_nodes(doc, marked, H)
        grads = tl.backward(tl.reduce_sum(X))
    g = grads.get(H)
    # every token position inside some sentence range receives gradient
    assert np.all(np.abs(g[1:]).sum(axis=1) > 0)


def test_dump_text_golden():
    doc = C.Document(doc_id="dump", sentences=[["a", "b"]],
                     entities=[[C.Mention(0, 0, 1, "PER", "a")]])
    maps = G.node_index_maps(doc)
    text = G.dump_text(maps, G.build_masks(maps))
    expected = (
        "nodes: mention0 sentence1 document2\n"
        "mask 0:\n100\n010\n001\n"
        "mask 1:\n100\n010\n001\n"
        "mask 2:\n110\n110\n001\n"
        "mask 3:\n100\n010\n001\n"
        "mask 4:\n100\n011\n011\n"
        "mask 5:\n111\n111\n111\n"
    )
    assert text == expected
