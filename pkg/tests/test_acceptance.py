"""End-to-end acceptance checks.

Each test here states a verifiable promise about the whole package:
gradients agree with finite differences end to end, structural attention
blocks exactly where the graph says so, edge masks match a brute-force
re-derivation, the pooling/attention/loss primitives obey their
closed-form contracts, training schedules hit their boundary values,
runs are bit-reproducible, metrics match hand counts on a committed
fixture, and — on worlds built to need them — the graph decoder and the
token-level cross-attention each buy a measurable quality margin over
their ablations.

The training-based checks (overfit, reasoning margin, clue margin) share
session-scoped fixtures so each configuration trains once; the three
together take roughly twenty minutes of CPU time.
"""
import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from docrel import tensorlib as tl
from docrel.corpus import (Document, Mention, RelationFact, SynthConfig,
                           Vocabulary, generate_synthetic, load_docred,
                           save_docred)
from docrel.decoder import head_masks, run_layer
from docrel.evaluation import f1_scores, heatmap_record
from docrel.graph import N_EDGE_TYPES, build_masks, node_index_maps
from docrel.head import adaptive_threshold_loss, clue_attention
from docrel.model import (ModelConfig, Prediction, document_loss, init_model,
                          named_parameters, parameter_group, predict_document,
                          prepare_document)
from docrel.training import (TrainConfig, TrainState, best_params,
                             clip_gradients, evaluate, lr_at,
                             save_checkpoint, train)
from test_graph import oracle_edge_masks

ROOT = Path(__file__).resolve().parent.parent


# ---------------------------------------------------------------------------
# 1. gradient integrity, end to end


def _toy_document():
    """Two sentences, three entities (one with a second mention)."""
    return Document(
        doc_id="grad0",
        sentences=[["alice", "works", "for", "acme", "."],
                   ["the", "firm", "lies", "in", "arden", "."]],
        entities=[
            [Mention(0, 0, 1, "PER", "alice")],
            [Mention(0, 3, 4, "ORG", "acme"), Mention(1, 0, 2, "ORG", "the firm")],
            [Mention(1, 4, 5, "LOC", "arden")],
        ],
        labels={RelationFact(0, 1, 1), RelationFact(1, 2, 0)},
    )


def test_end_to_end_gradient_matches_finite_differences():
    doc = _toy_document()
    vocab = Vocabulary.build([doc], ["located_in", "works_for"])
    cfg = ModelConfig(d_model=12, encoder_layers=1, encoder_heads=2,
                      encoder_ff=24, max_len=48, decoder_layers=1,
                      heads_per_edge=1, cross_heads=2, decoder_ff=24,
                      dropout=0.0)
    params = init_model(3, vocab, cfg)
    prep = prepare_document(doc, vocab)

    def loss_value():
        return document_loss(prep, params, cfg, vocab, training=False).item()

    t0 = time.monotonic()
    with tl.Tape():
        loss = document_loss(prep, params, cfg, vocab, training=False)
        grads = tl.backward(loss)

    rng = np.random.default_rng(0)
    h = 1e-5
    worst = {"encoder": 0.0, "decoder": 0.0, "classifier": 0.0}
    checked = {"encoder": 0, "decoder": 0, "classifier": 0}
    for name, p in named_parameters(params):
        analytic = grads.get(p)
        assert analytic is not None, f"no gradient reached {name}"
        flat_idx = (np.arange(p.data.size) if p.data.size <= 8
                    else rng.choice(p.data.size, size=6, replace=False))
        group = parameter_group(name)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = loss_value()
            p.data[idx] = orig - h
            fm = loss_value()
            p.data[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            assert err < 1e-4, (f"{name}[{idx}]: analytic {a:.3e} vs "
                                f"finite-difference {fd:.3e} (rel err {err:.2e})")
            worst[group] = max(worst[group], err)
            checked[group] += 1
    wall = time.monotonic() - t0

    assert all(n > 0 for n in checked.values()), checked
    assert all(e < 1e-4 for e in worst.values()), worst
    assert wall < 60.0, f"gradient check took {wall:.1f}s"


# ---------------------------------------------------------------------------
# 2. structural attention blocks exactly where the masks say


def test_structural_attention_blocking_and_row_sums_on_100_graphs():
    cfg = SynthConfig(docs=100, dev_docs=0, min_sentences=2, max_sentences=6,
                      min_entities=2, max_entities=5)
    docs, _ = generate_synthetic(cfg, seed=17)
    rng = np.random.default_rng(5)
    d_model = 12
    for i, doc in enumerate(docs):
        maps = node_index_maps(doc)
        masks = build_masks(maps)
        n = maps.n_nodes
        k = 1 if i % 2 == 0 else 2
        vocab = Vocabulary.build([doc], list(cfg.relations))
        model = init_model(i, vocab, ModelConfig(
            d_model=d_model, encoder_layers=1, encoder_heads=2, encoder_ff=24,
            max_len=96, decoder_layers=1, heads_per_edge=k, cross_heads=2,
            decoder_ff=24, dropout=0.0))
        layer = model.decoder.layers[0]
        x = tl.Tensor(rng.normal(size=(n, d_model)))
        H = tl.Tensor(rng.normal(size=(rng.integers(3, 12), d_model)))
        capture = {}
        run_layer(x, masks, H, layer, heads_per_edge=k, capture=capture)
        per_head = capture["self"][0]
        assert len(per_head) == N_EDGE_TYPES * k
        expanded = head_masks(masks, k, False)
        for h, probs in enumerate(per_head):
            mask = expanded[h]
            assert np.all(probs[mask == 0.0] == 0.0), \
                f"doc {doc.doc_id} head {h}: leak through a blocked edge"
            rows = probs.sum(axis=1)
            assert np.all(np.abs(rows - 1.0) <= 1e-9), \
                f"doc {doc.doc_id} head {h}: row sums off by {np.abs(rows - 1).max()}"


# ---------------------------------------------------------------------------
# 3. edge definitions vs an independent double-loop oracle


def test_edge_masks_match_double_loop_oracle_on_200_docs():
    worlds = [
        (SynthConfig(docs=100, dev_docs=0), 23),
        (SynthConfig(docs=100, dev_docs=0, min_sentences=2, max_sentences=10,
                     min_entities=2, max_entities=6, chain_rate=1.0,
                     parallel_chain_rate=0.5, repeat_rate=0.8), 29),
    ]
    total = 0
    for cfg, seed in worlds:
        docs, _ = generate_synthetic(cfg, seed=seed)
        for doc in docs:
            got = build_masks(node_index_maps(doc))
            want = oracle_edge_masks(doc)
            assert len(got) == len(want) == N_EDGE_TYPES
            for t in range(N_EDGE_TYPES):
                assert np.array_equal(got[t], want[t]), \
                    f"mask {t} differs on {doc.doc_id}"
            total += 1
    assert total == 200


# ---------------------------------------------------------------------------
# 4. pooling, pair attention, and loss closed forms


def test_logsumexp_pooling_bounds_elementwise():
    rng = np.random.default_rng(11)
    for shape in [(1, 7), (5, 3), (12, 8), (3, 1)]:
        x = rng.normal(scale=4.0, size=shape)
        out = tl.logsumexp(tl.Tensor(x), axis=0).data
        mx = x.max(axis=0)
        assert np.all(out >= mx - 1e-12)
        assert np.all(out <= mx + math.log(shape[0]) + 1e-12)


def test_clue_attention_is_probability_vector_and_hull_bound():
    rng = np.random.default_rng(13)
    for _ in range(20):
        l, d = int(rng.integers(2, 15)), int(rng.integers(2, 10))
        H = tl.Tensor(rng.normal(scale=2.0, size=(l, d)))
        h_s = tl.Tensor(rng.normal(size=(1, d)))
        h_o = tl.Tensor(rng.normal(size=(1, d)))
        clue, weights = clue_attention(H, h_s, h_o)
        w = weights.data.ravel()
        assert np.all(w >= 0.0)
        assert abs(w.sum() - 1.0) <= 1e-12
        lo, hi = H.data.min(axis=0), H.data.max(axis=0)
        c = clue.data.ravel()
        assert np.all(c >= lo - 1e-12) and np.all(c <= hi + 1e-12)


def test_adaptive_threshold_loss_closed_forms():
    # all logits equal, no gold: only the threshold-vs-negatives term remains
    # and equals ln(R + 1) for R real classes
    for R in (1, 4, 9):
        logits = tl.Tensor(np.zeros(R + 1))
        loss = adaptive_threshold_loss(logits, positives=[], threshold_id=0)
        assert abs(loss.item() - math.log(R + 1)) <= 1e-12

    # one real class, gold, logit equal to the threshold: the positive term
    # is ln 2 and the empty-negative-pool term is exactly 0
    logits = tl.Tensor(np.array([1.7, 1.7]))
    loss = adaptive_threshold_loss(logits, positives=[1], threshold_id=0)
    assert abs(loss.item() - math.log(2.0)) <= 1e-12

    # hierarchy with huge margins drives the loss to numerical zero
    logits = tl.Tensor(np.array([0.0, 40.0, -40.0, -40.0]))
    loss = adaptive_threshold_loss(logits, positives=[1], threshold_id=0)
    assert loss.item() <= 1e-12


# ---------------------------------------------------------------------------
# 8. schedule boundaries and clipping


def test_schedule_boundaries_exact_and_clip_norm():
    peak = 3e-4
    assert lr_at(0, 1000, peak) == 0.0
    assert lr_at(60, 1000, peak) == peak          # warmup end (ceil(0.06*1000))
    assert lr_at(30, 1000, peak) == pytest.approx(0.5 * peak, abs=0.0)
    assert lr_at(1000, 1000, peak) == 0.0

    rng = np.random.default_rng(3)
    grads = {f"p{i}": rng.normal(size=(4, 3)) for i in range(5)}
    scale = 10.0 / math.sqrt(sum((g ** 2).sum() for g in grads.values()))
    grads = {k: g * scale for k, g in grads.items()}
    raw, clipped = clip_gradients(grads, max_norm=1.0)
    assert abs(raw - 10.0) <= 1e-9
    assert abs(clipped - 1.0) <= 1e-9
    post = math.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert abs(post - 1.0) <= 1e-9

    small = {"p": np.full((2, 2), 0.1)}
    raw, clipped = clip_gradients(small, max_norm=1.0)
    assert raw == clipped == pytest.approx(0.2, abs=1e-12)
    assert np.array_equal(small["p"], np.full((2, 2), 0.1))


# ---------------------------------------------------------------------------
# 9. bit-identical reruns


def test_identical_seed_and_config_give_identical_history_and_checkpoints(tmp_path):
    from docrel import cli

    corpus = tmp_path / "corpus"
    synth_cfg = tmp_path / "synth.cfg"
    synth_cfg.write_text("docs = 12\ndev_docs = 4\nmin_sentences = 3\n"
                         "max_sentences = 4\nmin_entities = 3\nmax_entities = 4\n")
    assert cli.main(["synth", "--config", str(synth_cfg), "--seed", "5",
                     "--out", str(corpus)]) == 0

    train_cfg = tmp_path / "train.cfg"
    train_cfg.write_text("d_model = 12\nencoder_layers = 1\nencoder_heads = 2\n"
                         "encoder_ff = 24\nmax_len = 96\ndecoder_layers = 1\n"
                         "heads_per_edge = 1\ncross_heads = 2\ndecoder_ff = 24\n"
                         "dropout = 0.0\nepochs = 2\nbatch_size = 4\n")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--data", str(corpus), "--config",
                         str(train_cfg), "--seed", "9", "--out", str(out)]) == 0
        outs.append(out)

    for fname in ("history.jsonl", "last.ckpt", "best.ckpt"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, f"{fname} differs between identical runs"


# ---------------------------------------------------------------------------
# 10. metric hand counts on the committed golden fixture


def test_metric_hand_counts_on_golden_fixture():
    rels = ["located_in", "based_in", "works_for"]
    docs, rel_names = load_docred(ROOT / "tests" / "data" / "golden_eval.json",
                                  relations=rels)
    assert rel_names == rels and len(docs) == 5

    def P(doc_id, h, t, r):
        return Prediction(doc_id=doc_id, head=h, tail=t, relation=r,
                          logit=1.0, threshold_logit=0.0)

    preds = [
        P("g0", 0, 1, 0),   # correct, intra
        P("g0", 0, 2, 0),   # correct, inter
        P("g1", 1, 0, 1),   # correct, intra
        P("g1", 0, 1, 1),   # wrong direction
        P("g2", 0, 2, 0),   # correct, reasoning pair, inter
        P("g3", 2, 0, 0),   # wrong relation (gold works_for)
        P("g4", 0, 1, 0),   # spurious prediction on an unlabeled document
    ]
    rep = f1_scores(preds, docs, rels)
    # hand counts over the fixture: 6 gold facts, 7 predictions, 4 correct
    assert (rep.n_gold, rep.n_pred, rep.n_correct) == (6, 7, 4)
    assert rep.precision == 4 / 7
    assert rep.recall == 4 / 6
    p, r = 4 / 7, 4 / 6
    assert rep.f1 == 2 * p * r / (p + r)
    # intra pairs: gold 3, predicted 4, correct 2; inter: gold 3, pred 3, correct 2
    pi, ri = 2 / 4, 2 / 3
    assert rep.intra_f1 == 2 * pi * ri / (pi + ri)
    assert rep.inter_f1 == 2 / 3
    assert rep.infer_f1 == 1.0

    # the (alpha, beta, located_in) name triple is "known from training":
    # it leaves gold g0/g2 and predictions g0/g4
    rep_ign = f1_scores(preds, docs, rels,
                        train_facts={("alpha", "beta", "located_in")})
    pg, rg = 3 / 5, 3 / 4
    assert rep_ign.ign_f1 == 2 * pg * rg / (pg + rg)


# ---------------------------------------------------------------------------
# shared machinery for the trained-model checks (5, 6, 7)


SEEDS = (0, 1, 2)


def _world(scfg: SynthConfig, seed: int):
    docs, _ = generate_synthetic(scfg, seed)
    dev, dman = generate_synthetic(scfg, seed + 1000003, n_docs=scfg.dev_docs,
                                   id_prefix="dev")
    vocab = Vocabulary.build(docs + dev, list(scfg.relations))
    return docs, dev, vocab, dman


def _fit_and_eval(docs, dev, vocab, mcfg, tcfg, keep_state=False):
    t0 = time.monotonic()
    state = train(docs, dev, vocab, mcfg, tcfg)
    wall = time.monotonic() - t0
    prep_train = [prepare_document(d, vocab) for d in docs if d.n_entities >= 2]
    prep_dev = [prepare_document(d, vocab) for d in dev if d.n_entities >= 2]
    r_train = evaluate(prep_train, state.params, mcfg, vocab)
    bp = best_params(state, vocab, mcfg)
    r_dev = evaluate(prep_dev, bp, mcfg, vocab)
    out = {"train": r_train, "dev": r_dev, "wall": wall, "best": bp}
    if keep_state:
        out["state"] = state
    return out


# ---------------------------------------------------------------------------
# 5. synthetic overfit + generalization, toy preset


@pytest.fixture(scope="session")
def toy_runs():
    scfg = SynthConfig.load(ROOT / "configs" / "synth_toy.cfg")
    mcfg = ModelConfig()  # the toy preset: configs/toy.cfg mirrors these defaults
    runs = []
    for seed in SEEDS:
        docs, dev, vocab, _ = _world(scfg, 101 + seed)
        runs.append(_fit_and_eval(docs, dev, vocab, mcfg,
                                  TrainConfig(seed=seed)))
    return runs


def test_toy_preset_overfits_and_generalizes(toy_runs):
    for run in toy_runs:
        assert run["wall"] < 600.0, f"training took {run['wall']:.0f}s"
        assert run["train"].f1 >= 0.99, f"train F1 {run['train'].f1:.4f}"
    dev_median = statistics.median(run["dev"].f1 for run in toy_runs)
    assert dev_median >= 0.90, \
        f"dev F1 {[round(r['dev'].f1, 4) for r in toy_runs]} median {dev_median:.4f}"


# ---------------------------------------------------------------------------
# 6. the graph decoder buys cross-sentence reasoning quality


COMPOSE_DOCS = 120
COMPOSE_DEV = 40
COMPOSE_EPOCHS = 30


@pytest.fixture(scope="session")
def compose_runs():
    scfg = SynthConfig.load(ROOT / "configs" / "synth_compose.cfg")
    scfg = SynthConfig(**{**scfg.__dict__,
                          "docs": COMPOSE_DOCS, "dev_docs": COMPOSE_DEV})
    runs = []
    for seed in SEEDS:
        docs, dev, vocab, _ = _world(scfg, 201 + seed)
        tcfg = TrainConfig(epochs=COMPOSE_EPOCHS, seed=seed)
        full = _fit_and_eval(docs, dev, vocab, ModelConfig(), tcfg)
        byp = _fit_and_eval(docs, dev, vocab, ModelConfig(bypass_decoder=True),
                            tcfg)
        runs.append({"full": full, "bypass": byp})
    return runs


def test_decoder_improves_cross_sentence_f1(compose_runs):
    deltas = [run["full"]["dev"].inter_f1 - run["bypass"]["dev"].inter_f1
              for run in compose_runs]
    med = statistics.median(deltas)
    assert med >= 0.05, f"inter-F1 deltas {[round(d, 4) for d in deltas]} " \
                        f"median {med:.4f}"


# ---------------------------------------------------------------------------
# 7. token-level cross-attention buys clue-gated quality, and the exported
#    pair attention actually points at the planted trigger


CLUE_EPOCHS = 30

# Both arms share a one-layer token encoder.  One self-attention hop lets the
# trigger's own row absorb whether it sits in the announcement frame, but a
# second hop would be needed to forward that evidence into the entity-mention
# rows that the pooled graph is built from.  With a single hop, the only route
# from gate evidence to a pair decision is the decoder's token-level
# cross-attention — exactly the channel the ablation removes — so the
# comparison isolates what that channel contributes.


@pytest.fixture(scope="session")
def clue_runs():
    scfg = SynthConfig.load(ROOT / "configs" / "synth_clue.cfg")
    runs = []
    for seed in SEEDS:
        docs, dev, vocab, dman = _world(scfg, 301 + seed)
        tcfg = TrainConfig(epochs=CLUE_EPOCHS, seed=seed)
        mfull = ModelConfig(encoder_layers=1)
        mnocross = ModelConfig(encoder_layers=1, disable_cross=True)
        full = _fit_and_eval(docs, dev, vocab, mfull, tcfg, keep_state=True)
        nocross = _fit_and_eval(docs, dev, vocab, mnocross, tcfg)
        runs.append({"full": full, "nocross": nocross, "dev": dev,
                     "dman": dman, "vocab": vocab, "mcfg": mfull,
                     "tcfg": tcfg})
    return runs


def _trigger_top3_rate(run, workdir):
    """Fraction of fired gated dev pairs whose planted trigger lands in the
    top-3 of the heatmap written by the real `explain` command: the trained
    model is saved as a checkpoint, the dev split as a data file, and each
    pair is queried through the CLI exactly as a user would."""
    from docrel import cli

    dman, vocab = run["dman"], run["vocab"]
    state = run["full"]["state"]
    best_state = TrainState(
        params=run["full"]["best"], optimizer=state.optimizer, rng=state.rng,
        step=state.step, epoch=state.epoch, best_metric=state.best_metric,
        best=state.best, history=state.history)
    ckpt = workdir / "best.ckpt"
    save_checkpoint(ckpt, best_state, run["mcfg"], run["tcfg"], vocab)
    data = workdir / "dev.json"
    save_docred(run["dev"], data, list(vocab.relations))

    gated = dman["gated"]
    rel_ids = {r: i for i, r in enumerate(dman["relations"])}
    by_id = {e["doc_id"]: e for e in dman["docs"]}
    hits = total = 0
    for doc in run["dev"]:
        fired = [(h, rel, t) for h, rel, t in by_id[doc.doc_id]["patterns"]
                 if RelationFact(h, t, rel_ids[rel]) in doc.labels]
        for h, rel, t in fired:
            out = workdir / f"explain-{doc.doc_id}-{h}-{t}"
            code = cli.main(["explain", "--checkpoint", str(ckpt),
                             "--data", str(data), "--doc", doc.doc_id,
                             "--head", str(h), "--tail", str(t),
                             "--top-k", "3", "--out", str(out)])
            assert code == 0
            record = json.loads((out / "heatmap.json").read_text("utf-8"))
            total += 1
            if any(e["token"] == gated[rel] for e in record["top"]):
                hits += 1
    return hits, total


def test_cross_attention_improves_clue_gated_f1(clue_runs):
    deltas = [run["full"]["dev"].f1 - run["nocross"]["dev"].f1
              for run in clue_runs]
    med = statistics.median(deltas)
    assert med >= 0.05, f"F1 deltas {[round(d, 4) for d in deltas]} " \
                        f"median {med:.4f}"


def test_exported_pair_attention_finds_planted_triggers(clue_runs,
                                                        tmp_path_factory):
    rates = []
    for i, run in enumerate(clue_runs):
        workdir = tmp_path_factory.mktemp(f"explain-seed{i}")
        hits, total = _trigger_top3_rate(run, workdir)
        assert total > 0, "no fired gated pairs in the dev split"
        rates.append(hits / total)
    med = statistics.median(rates)
    assert med >= 0.80, f"trigger top-3 rates {[round(r, 3) for r in rates]} " \
                        f"median {med:.3f}"
