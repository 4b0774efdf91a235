"""Training loop: warmup/decay schedule, Adam with decoupled weight decay,
global-norm gradient clipping, per-group learning rates, deterministic
batching, periodic dev evaluation, and resumable checkpoints.

Everything is driven by one seeded generator (shuffling and dropout draw
from it in a fixed order), so a (config, seed) pair reproduces a run
bit-for-bit — and a checkpoint saved at an epoch boundary resumes into the
identical trajectory.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorlib as tl
from .attention import ConfigError
from .corpus import Vocabulary
from .evaluation import collect_fact_names, f1_scores
from .model import (ModelConfig, ModelParams, document_loss, init_model,
                    named_parameters, parameter_group, predict_document,
                    prepare_document)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries step and batch diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_encoder: float = 9e-5
    lr_decoder: float = 3e-4
    lr_classifier: float = 6e-4
    warmup_fraction: float = 0.06
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0     # dev-eval period in steps; 0 = each epoch end

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), "
                              f"got {self.warmup_fraction}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    _INTS = ("epochs", "batch_size", "seed", "eval_every")
    _FLOATS = ("lr_encoder", "lr_decoder", "lr_classifier", "warmup_fraction",
               "weight_decay", "clip_norm", "beta1", "beta2", "eps")

    @classmethod
    def known_keys(cls):
        return set(cls._INTS) | set(cls._FLOATS)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for key, value in mapping.items():
            if key in cls._INTS:
                kwargs[key] = int(value)
            elif key in cls._FLOATS:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown training-config key {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_meta(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_meta(cls, meta: dict) -> "TrainConfig":
        return cls(**meta)

    def peak_lrs(self) -> dict:
        return {"encoder": self.lr_encoder, "decoder": self.lr_decoder,
                "classifier": self.lr_classifier}


def lr_at(step: int, total_steps: int, peak: float,
          warmup_fraction: float = 0.06) -> float:
    """Linear warmup to `peak` over the first fraction of steps, then linear
    decay to zero at `total_steps`. Exactly 0 at step 0 and at the end."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    step = min(max(step, 0), total_steps)
    warmup = math.ceil(warmup_fraction * total_steps)
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    return peak * (total_steps - step) / (total_steps - warmup)


def clip_gradients(grads: dict, max_norm: float):
    """Scale `grads` in place so the global L2 norm is min(raw, max_norm).

    Returns (raw_norm, clipped_norm)."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        return total, max_norm
    return total, total


class AdamW:
    """Adam moments with bias correction and decoupled weight decay.

    The decay term is applied directly to the parameter, scaled by the
    group learning rate — a group at lr 0 is completely frozen.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, named_params, grads: dict, lrs: dict, weight_decay: float):
        """One update; `grads` maps name -> array, `lrs` maps group -> lr."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = grads[name]
            lr = lrs[parameter_group(name)]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + weight_decay * p.data)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    best_metric: float = -1.0
    best: dict | None = None          # name -> array snapshot of best params
    history: list = field(default_factory=list)


def new_state(vocab: Vocabulary, model_cfg: ModelConfig,
              train_cfg: TrainConfig) -> TrainState:
    params = init_model(train_cfg.seed, vocab, model_cfg)
    opt = AdamW(named_parameters(params), train_cfg.beta1, train_cfg.beta2,
                train_cfg.eps)
    return TrainState(params=params, optimizer=opt,
                      rng=np.random.default_rng(train_cfg.seed))


def evaluate(prepared, params: ModelParams, model_cfg: ModelConfig,
             vocab: Vocabulary, train_fact_names=None):
    """Inference + metrics over prepared documents."""
    preds = []
    for prep in prepared:
        preds.extend(predict_document(prep, params, model_cfg, vocab)[0])
    return f1_scores(preds, [p.doc for p in prepared], vocab.relations,
                     train_facts=train_fact_names)


def train(train_docs, dev_docs, vocab: Vocabulary, model_cfg: ModelConfig,
          train_cfg: TrainConfig, state: TrainState | None = None,
          stop_after: int | None = None, log=None) -> TrainState:
    """Run (or resume) training; returns the final state.

    `state` resumes a checkpointed run: the epoch counter inside it
    determines how many of `train_cfg.epochs` remain. `stop_after` pauses
    the run at an earlier epoch boundary without shortening the learning-
    rate schedule, which always spans the full `train_cfg.epochs`. History
    records one line per optimizer step ({step, lrs, train_loss});
    epoch-final records also carry dev_f1 / dev_ign_f1 when dev documents
    are given.
    """
    train_cfg.validate()
    model_cfg.validate()
    if state is None:
        state = new_state(vocab, model_cfg, train_cfg)
    prepared = [prepare_document(d, vocab) for d in train_docs if d.n_entities >= 2]
    if not prepared:
        raise ConfigError("no trainable documents (every one has < 2 entities)")
    prepared_dev = [prepare_document(d, vocab) for d in dev_docs if d.n_entities >= 2]
    train_fact_names = collect_fact_names(train_docs, vocab.relations)

    steps_per_epoch = math.ceil(len(prepared) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    peaks = train_cfg.peak_lrs()
    named = named_parameters(state.params)
    last_epoch = train_cfg.epochs if stop_after is None else min(
        stop_after, train_cfg.epochs)

    def run_dev_eval():
        report = evaluate(prepared_dev, state.params, model_cfg, vocab,
                          train_fact_names)
        record = state.history[-1] if state.history else {"step": state.step}
        record["dev_f1"] = report.f1
        record["dev_ign_f1"] = report.ign_f1
        if report.f1 > state.best_metric:
            state.best_metric = report.f1
            state.best = {name: p.data.copy() for name, p in named}
        return report

    while state.epoch < last_epoch:
        order = state.rng.permutation(len(prepared))
        for lo in range(0, len(order), train_cfg.batch_size):
            chunk = order[lo:lo + train_cfg.batch_size]
            doc_losses = []
            with tl.Tape():
                for i in chunk:
                    loss = document_loss(prepared[i], state.params, model_cfg,
                                         vocab, training=True, rng=state.rng)
                    if loss is not None:
                        doc_losses.append((prepared[i].doc_id, loss))
                state.step += 1
                if not doc_losses:
                    continue
                batch_loss = tl.reduce_mean(
                    tl.concat([tl.reshape(l, (1,)) for _, l in doc_losses], axis=0))
                loss_value = batch_loss.item()
                if not math.isfinite(loss_value):
                    per_doc = {d: float(l.data) for d, l in doc_losses}
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at step {state.step}; "
                        f"per-document losses: {per_doc}")
                grad_map = tl.backward(batch_loss)
            grads = {name: grad_map.get(p) for name, p in named}
            clip_gradients(grads, train_cfg.clip_norm)
            lrs = {g: lr_at(state.step, total_steps, peak, train_cfg.warmup_fraction)
                   for g, peak in peaks.items()}
            state.optimizer.step(named, grads, lrs, train_cfg.weight_decay)
            state.history.append({"step": state.step, "lr": dict(lrs),
                                  "train_loss": loss_value})
            if (prepared_dev and train_cfg.eval_every > 0
                    and state.step % train_cfg.eval_every == 0):
                run_dev_eval()
        state.epoch += 1
        if prepared_dev and train_cfg.eval_every == 0:
            report = run_dev_eval()
            if log:
                log(f"epoch {state.epoch}: step {state.step} "
                    f"loss {state.history[-1].get('train_loss', float('nan')):.4f} "
                    f"dev F1 {report.f1:.4f}")
        elif log:
            log(f"epoch {state.epoch}: step {state.step}")
    if (prepared_dev and train_cfg.eval_every > 0
            and state.epoch >= train_cfg.epochs
            and total_steps % train_cfg.eval_every != 0):
        run_dev_eval()   # make sure the final parameters were considered
    if state.best is None and state.epoch >= train_cfg.epochs:
        # no dev split was given: fall back to the final parameters
        state.best = {name: p.data.copy() for name, p in named}
    return state


def best_params(state: TrainState, vocab: Vocabulary,
                model_cfg: ModelConfig) -> ModelParams:
    """A fresh ModelParams holding the best-on-dev snapshot."""
    params = init_model(0, vocab, model_cfg)
    named = dict(named_parameters(params))
    for name, arr in (state.best or {}).items():
        named[name].data = arr.copy()
    return params


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, state: TrainState, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, vocab: Vocabulary) -> None:
    tensors = {}
    for name, p in named_parameters(state.params):
        tensors[f"param.{name}"] = p.data
    for name, arr in state.optimizer.m.items():
        tensors[f"adam_m.{name}"] = arr
    for name, arr in state.optimizer.v.items():
        tensors[f"adam_v.{name}"] = arr
    for name, arr in (state.best or {}).items():
        tensors[f"best.{name}"] = arr
    meta = {
        "model": model_cfg.to_meta(),
        "train": train_cfg.to_meta(),
        "vocab": vocab.to_meta(),
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": state.optimizer.t,
        "best_metric": state.best_metric,
        "has_best": state.best is not None,
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }
    tl.save_tensors(path, tensors, meta)


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def load_checkpoint(path):
    """Returns (state, model_cfg, train_cfg, vocab)."""
    try:
        tensors, meta = tl.load_tensors(path)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    for key in ("model", "train", "vocab", "step", "rng_state"):
        if key not in meta:
            raise CheckpointError(f"{path}: checkpoint metadata missing {key!r}")
    model_cfg = ModelConfig.from_meta(meta["model"])
    train_cfg = TrainConfig.from_meta(meta["train"])
    vocab = Vocabulary.from_meta(meta["vocab"])
    params = init_model(0, vocab, model_cfg)
    named = named_parameters(params)
    opt = AdamW(named, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    opt.t = int(meta["adam_t"])
    for name, p in named:
        key = f"param.{name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor section {key!r}")
        if tensors[key].shape != p.data.shape:
            raise CheckpointError(f"{path}: {key} has shape {tensors[key].shape}, "
                                  f"expected {p.data.shape}")
        p.data = tensors[key].astype(p.data.dtype)
        opt.m[name] = tensors[f"adam_m.{name}"].copy()
        opt.v[name] = tensors[f"adam_v.{name}"].copy()
    best = None
    if meta.get("has_best"):
        best = {name: tensors[f"best.{name}"].copy() for name, _ in named}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(params=params, optimizer=opt, rng=rng,
                       step=int(meta["step"]), epoch=int(meta["epoch"]),
                       best_metric=float(meta["best_metric"]), best=best,
                       history=list(meta["history"]))
    return state, model_cfg, train_cfg, vocab
