"""Command-line surface: corpus generation, training, evaluation, and
attention explanations as batch subcommands.

Design notes:
* numeric knobs live in key=value config files; flags carry only paths,
  seeds, and ablation switches, so a run's provenance is a (config, seed)
  pair recorded in its manifest;
* heavy imports happen inside the command handlers so the thread-count
  environment variable can take effect before numpy loads;
* exit codes: 0 success, 2 usage errors, 3 data/config/checkpoint errors,
  1 unexpected internal failures. Errors print one machine-parsable line:
  ``error: <Category>: <message>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DATA = 3

DEV_SEED_OFFSET = 1000003  # prime; keeps train/dev generator streams apart


class UsageError(ValueError):
    """Command-line misuse that argparse cannot catch itself."""


def _configure_threads() -> None:
    """Apply DOCREL_THREADS to the BLAS/OpenMP knobs numpy reads at import.

    Must run before the first numpy import, hence the lazy imports below.
    """
    raw = os.environ.get("DOCREL_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DOCREL_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"DOCREL_THREADS must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        resolved: dict) -> None:
    manifest = {
        "command": command,
        "version": f"docrel-{__version__}",
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "config": str(args.config) if getattr(args, "config", None) else None,
        "seed": getattr(args, "seed", None),
        "out": str(out_dir),
        "resolved": resolved,
    }
    _write_json(out_dir / "run_manifest.json", manifest)


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    from .corpus import SynthConfig, generate_synthetic, parse_kv_file, save_docred

    mapping = parse_kv_file(args.config)
    if not mapping:
        raise UsageError(f"{args.config}: synthetic config file defines no keys")
    cfg = SynthConfig.from_mapping(mapping)

    train_docs, train_manifest = generate_synthetic(cfg, args.seed)
    dev_docs, dev_manifest = generate_synthetic(
        cfg, args.seed + DEV_SEED_OFFSET, n_docs=cfg.dev_docs, id_prefix="dev")
    relations = list(cfg.relations)

    out = _ensure_out(args.out)
    save_docred(train_docs, out / "train.json", relations)
    save_docred(dev_docs, out / "dev.json", relations)
    with open(out / "relations.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(relations) + "\n")
    _write_json(out / "rules.json", {"train": train_manifest, "dev": dev_manifest})
    _write_run_manifest(out, "synth", args,
                        {"synth": dataclasses.asdict(cfg),
                         "dev_seed": args.seed + DEV_SEED_OFFSET})

    n_facts = sum(len(d.labels) for d in train_docs)
    print(f"wrote {len(train_docs)} train / {len(dev_docs)} dev documents "
          f"({n_facts} train facts) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared config plumbing


def _split_train_config(config_path):
    """Split one key=value file into (ModelConfig, TrainConfig)."""
    from .attention import ConfigError
    from .corpus import parse_kv_file
    from .model import ModelConfig
    from .training import TrainConfig

    mapping = parse_kv_file(config_path) if config_path else {}
    model_keys = ModelConfig.known_keys()
    train_keys = TrainConfig.known_keys()
    unknown = set(mapping) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = ModelConfig.from_mapping(
        {k: v for k, v in mapping.items() if k in model_keys})
    train_cfg = TrainConfig.from_mapping(
        {k: v for k, v in mapping.items() if k in train_keys})
    return model_cfg, train_cfg


def _apply_flags(model_cfg, train_cfg, args):
    overrides = {}
    if getattr(args, "no_c_msa", False):
        overrides["disable_cross"] = True
    if getattr(args, "plain_msa", False):
        overrides["plain_masks"] = True
    if getattr(args, "no_decoder", False):
        overrides["bypass_decoder"] = True
    if getattr(args, "layers", None) is not None:
        overrides["decoder_layers"] = args.layers
    if overrides:
        model_cfg = dataclasses.replace(model_cfg, **overrides)
    if getattr(args, "seed", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg


def _load_split(data_dir: Path, name: str, relations):
    from .corpus import CorpusError, load_docred
    path = data_dir / name
    if not path.exists():
        raise CorpusError(f"{path}: missing; expected a data directory with "
                          f"train.json, dev.json and relations.txt")
    return load_docred(path, relations)[0]


def _load_relations(data_dir: Path):
    from .corpus import CorpusError
    path = data_dir / "relations.txt"
    if not path.exists():
        raise CorpusError(f"{path}: missing; expected a data directory with "
                          f"train.json, dev.json and relations.txt")
    with open(path, "r", encoding="utf-8") as f:
        relations = [line.strip() for line in f if line.strip()]
    if not relations:
        raise CorpusError(f"{path}: no relation names found")
    return relations


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    from .corpus import Vocabulary
    from .training import load_checkpoint, save_checkpoint, train, TrainState, best_params

    data_dir = Path(args.data)
    relations = _load_relations(data_dir)
    train_docs = _load_split(data_dir, "train.json", relations)
    dev_docs = _load_split(data_dir, "dev.json", relations)

    out = _ensure_out(args.out)
    last_path = out / "last.ckpt"
    state = None
    if args.resume and last_path.exists():
        state, model_cfg, train_cfg, vocab = load_checkpoint(last_path)
        print(f"resuming from {last_path} at epoch {state.epoch}")
    else:
        model_cfg, train_cfg = _split_train_config(args.config)
        model_cfg, train_cfg = _apply_flags(model_cfg, train_cfg, args)
        vocab = Vocabulary.build(train_docs + dev_docs, relations)

    state = train(train_docs, dev_docs, vocab, model_cfg, train_cfg,
                  state=state, stop_after=args.stop_after, log=print)

    save_checkpoint(last_path, state, model_cfg, train_cfg, vocab)
    if state.best is not None:
        best_state = TrainState(
            params=best_params(state, vocab, model_cfg),
            optimizer=state.optimizer, rng=state.rng, step=state.step,
            epoch=state.epoch, best_metric=state.best_metric,
            best=state.best, history=state.history)
        save_checkpoint(out / "best.ckpt", best_state, model_cfg, train_cfg, vocab)
    with open(out / "history.jsonl", "w", encoding="utf-8") as f:
        for record in state.history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    _write_run_manifest(out, "train", args,
                        {"model": model_cfg.to_meta(), "train": train_cfg.to_meta(),
                         "data": str(data_dir)})

    tail = state.history[-1] if state.history else {}
    dev_note = (f", best dev F1 {state.best_metric:.4f}"
                if state.best_metric >= 0 else "")
    print(f"finished at step {state.step} "
          f"(train loss {tail.get('train_loss', float('nan')):.4f}{dev_note}); "
          f"checkpoints in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    from .corpus import load_docred
    from .evaluation import collect_fact_names, f1_scores
    from .model import predict_document, prepare_document
    from .training import load_checkpoint

    state, model_cfg, _, vocab = load_checkpoint(args.checkpoint)
    docs = load_docred(args.data, vocab.relations)[0]

    train_facts = None
    if args.train_facts:
        train_docs = load_docred(args.train_facts, vocab.relations)[0]
        train_facts = collect_fact_names(train_docs, vocab.relations)

    predictions = []
    for doc in docs:
        if doc.n_entities < 2:
            continue
        prep = prepare_document(doc, vocab)
        predictions.extend(predict_document(prep, state.params, model_cfg, vocab)[0])

    report = f1_scores(predictions, docs, vocab.relations, train_facts=train_facts)

    out = _ensure_out(args.out)
    payload = report.to_json()
    if train_facts is None:
        payload["notice"] = "ign_f1 omitted: pass --train-facts to enable it"
    _write_json(out / "report.json", payload)
    _write_json(out / "predictions.json", [
        {"doc_id": p.doc_id, "h": p.head, "t": p.tail,
         "r": vocab.relations[p.relation], "logit_r": p.logit,
         "logit_th": p.threshold_logit}
        for p in predictions])
    _write_run_manifest(out, "eval", args,
                        {"checkpoint": str(args.checkpoint),
                         "data": str(args.data),
                         "train_facts": str(args.train_facts) if args.train_facts else None})

    print(report.format())
    if train_facts is None:
        print("note: ign_f1 omitted; pass --train-facts to enable it")
    return EXIT_OK


# ---------------------------------------------------------------------------
# explain


def cmd_explain(args: argparse.Namespace) -> int:
    from .corpus import CorpusError, load_docred
    from .evaluation import heatmap_record
    from .model import predict_document, prepare_document
    from .training import load_checkpoint

    state, model_cfg, _, vocab = load_checkpoint(args.checkpoint)
    docs = load_docred(args.data, vocab.relations)[0]
    by_id = {d.doc_id: d for d in docs}
    if args.doc not in by_id:
        raise CorpusError(f"document {args.doc!r} not found in {args.data}; "
                          f"{len(by_id)} documents available")
    doc = by_id[args.doc]
    h, t = args.head, args.tail
    if not (0 <= h < doc.n_entities and 0 <= t < doc.n_entities) or h == t:
        raise CorpusError(f"entity pair ({h}, {t}) does not exist in "
                          f"{args.doc!r}, which has {doc.n_entities} entities")

    prep = prepare_document(doc, vocab)
    predictions, clues = predict_document(prep, state.params, model_cfg, vocab,
                                          want_clues=True)
    record = heatmap_record(doc, prep.marked, vocab, h, t, clues[(h, t)],
                            top_k=args.top_k)
    record["predicted_relations"] = [
        vocab.relations[p.relation] for p in predictions
        if p.head == h and p.tail == t]

    out = _ensure_out(args.out)
    _write_json(out / "heatmap.json", record)
    _write_run_manifest(out, "explain", args,
                        {"checkpoint": str(args.checkpoint), "data": str(args.data),
                         "doc": args.doc, "head": h, "tail": t})

    print(f"{record['head_name']} -> {record['tail_name']} "
          f"(predicted: {record['predicted_relations'] or ['<none>']})")
    for entry in record["top"]:
        marks = "".join(("M" if entry["is_mention_token"] else "-",
                         "K" if entry["is_marker"] else "-"))
        print(f"  {entry['weight']:.4f} {marks} {entry['token']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docrel",
        description="Document-level relation extraction: synthesize corpora, "
                    "train, evaluate, and explain predictions.")
    parser.add_argument("--version", action="version",
                        version=f"docrel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--config", required=True,
                         help="key=value file of corpus knobs")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a data directory")
    p_train.add_argument("--data", required=True,
                         help="directory with train.json/dev.json/relations.txt")
    p_train.add_argument("--config", default=None,
                         help="key=value file of model + optimizer knobs")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from <out>/last.ckpt if present")
    p_train.add_argument("--stop-after", type=int, default=None,
                         help="pause after this epoch (schedule keeps full length)")
    p_train.add_argument("--layers", type=int, default=None,
                         help="override the number of graph-decoder layers")
    p_train.add_argument("--no-c-msa", action="store_true", dest="no_c_msa",
                         help="ablation: drop the decoder-to-token cross-attention")
    p_train.add_argument("--plain-msa", action="store_true", dest="plain_msa",
                         help="ablation: replace edge-type masks with all-ones")
    p_train.add_argument("--no-decoder", action="store_true", dest="no_decoder",
                         help="ablation: bypass the graph decoder entirely")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a data file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="corpus JSON file")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--train-facts", default=None, dest="train_facts",
                        help="training corpus JSON; enables the ignore-known score")
    p_eval.set_defaults(func=cmd_eval)

    p_explain = sub.add_parser(
        "explain", help="export clue-attention weights for one entity pair")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--data", required=True, help="corpus JSON file")
    p_explain.add_argument("--doc", required=True, help="document id")
    p_explain.add_argument("--head", type=int, required=True)
    p_explain.add_argument("--tail", type=int, required=True)
    p_explain.add_argument("--top-k", type=int, default=10, dest="top_k")
    p_explain.add_argument("--out", required=True, help="output directory")
    p_explain.set_defaults(func=cmd_explain)

    return parser


def _data_error_types():
    from .attention import ConfigError
    from .corpus import CorpusError, SchemaError
    from .encoder import OverlengthError
    from .training import CheckpointError, TrainingDiverged
    return (ConfigError, CorpusError, SchemaError, OverlengthError,
            CheckpointError, TrainingDiverged, OSError)


def main(argv=None) -> int:
    try:
        _configure_threads()
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _data_error_types() as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - safety net
        message = " ".join(str(exc).split())
        print(f"error: internal: {type(exc).__name__}: {message}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
