"""Training loop, evaluation and optimizer over a D-RF network."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import spike_stats
from .autograd import (
    GradientSet,
    SurrogateSpec,
    bptt_backward,
    cross_entropy,
    network_backward,
    network_forward,
)
from .core import DRFError, OptimizerConfig, RunConfig, SplitMixRNG, make_rng
from .network import Model, init_model

METRIC_COLUMNS = ("epoch", "split", "loss", "acc", "spike_rate", "wallclock_s")
DATA_STREAM_KEY = 0xBA7C


class NumericAbort(DRFError):
    def __init__(self, message: str, dump_path: str | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (diagnostics: {dump_path})")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class ForwardStats:
    spike_rate: float
    layer_rates: tuple[float, ...]
    correct: int
    count: int

    @property
    def acc(self) -> float:
        return self.correct / max(self.count, 1)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    stats: ForwardStats
    lr: float


@dataclass
class TrainState:
    config: RunConfig
    model: Model
    opt: AdamState
    rng: SplitMixRNG  # shuffling stream; epoch e draws from rng.fork(e)
    step: int = 0
    history: list = field(default_factory=list)

    def spec(self) -> SurrogateSpec:
        n = self.config.neuron
        return SurrogateSpec(n.sigma, n.h, n.s)


def new_state(config: RunConfig, input_channels: int, classes: int) -> TrainState:
    root = make_rng(config.seed)
    model = init_model(config, input_channels, classes, root.fork(1))
    return TrainState(config, model, AdamState.zeros_like(model.params), root.fork(DATA_STREAM_KEY))


# ------------------------------------------------------------- forward


def _stats(tape, labels) -> ForwardStats:
    s = spike_stats(tape.spikes) if tape.spike == "hard" else None
    pred = np.argmax(tape.scores, axis=1)
    correct = int(np.sum(pred == labels))
    if s is None:
        rates = tuple(float(np.mean(x)) for x in tape.spikes)
        return ForwardStats(float(np.mean(rates)), rates, correct, len(labels))
    return ForwardStats(s.rate, s.layer_rates, correct, len(labels))


def forward_loss(model: Model, x, labels, mode: str = "parallel", spec: SurrogateSpec = SurrogateSpec()):
    """Cross-entropy of the time-mean readout; returns (loss, stats, tape, dloss/dscores)."""
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.ndim != 3 or x.shape[0] != labels.shape[0]:
        raise ValueError(f"batch of shape {x.shape} with {labels.shape[0]} labels")
    tape = network_forward(model, x, mode=mode, spec=spec)
    loss, g_scores = cross_entropy(tape.scores, labels)
    return loss, _stats(tape, labels), tape, g_scores


# ------------------------------------------------------------ optimizer


def learning_rate(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "cosine" and total_steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return cfg.lr


def clip_by_global_norm(grads: GradientSet, max_norm: float) -> tuple[GradientSet, float]:
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


def adam_update(params: dict[str, np.ndarray], grads: GradientSet, state: AdamState, cfg: OptimizerConfig, lr: float) -> None:
    """In-place Adam step with bias correction."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        if lr != 0.0:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def check_parameters(model: Model) -> None:
    """Raise if any parameter left its valid domain."""
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise NumericAbort(f"parameter {k} is not finite")
    for l in range(model.depth):
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # overflow shows up as a non-finite value
                model.dendritic(l)
                model.soma(l)
        except ValueError as err:
            raise NumericAbort(f"layer {l} parameters invalid: {err}") from None
    if not 0.0 < model.leak < 1.0:
        raise NumericAbort("readout leak left (0, 1)")


def _dump(model: Model, where, info: dict) -> str | None:
    if where is None:
        return None
    path = Path(where) / "numeric_abort.json"
    norms = {k: float(np.linalg.norm(np.nan_to_num(v, nan=np.inf))) for k, v in model.params.items()}
    path.write_text(json.dumps({**info, "param_norms": norms}, indent=2, default=str))
    return str(path)


def train_step(state: TrainState, x, labels, mode: str = "parallel", total_steps: int = 0, dump_dir=None) -> StepResult:
    """One optimizer step. ``mode='sequential'`` runs the step-by-step forward
    and reverse-time backward; ``'parallel'`` uses the FFT routes."""
    cfg = state.config
    spec = state.spec()
    model = state.model
    loss, stats, tape, g_scores = forward_loss(model, x, labels, mode, spec)
    if not math.isfinite(loss):
        path = _dump(model, dump_dir, {"step": state.step, "loss": loss})
        raise NumericAbort(f"non-finite loss at step {state.step}", path)
    backward = network_backward if mode == "parallel" else bptt_backward
    grads = backward(model, tape, g_scores, spec, cfg.neuron.train_alpha)
    grads, norm = clip_by_global_norm(grads, cfg.optimizer.clip_norm)
    if not math.isfinite(norm):
        path = _dump(model, dump_dir, {"step": state.step, "loss": loss, "grad_norm": norm})
        raise NumericAbort(f"non-finite gradient at step {state.step}", path)
    lr = learning_rate(cfg.optimizer, state.step, total_steps)
    adam_update(model.params, grads, state.opt, cfg.optimizer, lr)
    model.bump_version()
    state.step += 1
    try:
        check_parameters(model)
    except NumericAbort as err:
        path = _dump(model, dump_dir, {"step": state.step, "loss": loss, "grad_norm": norm, "reason": str(err)})
        raise NumericAbort(str(err), path) from None
    return StepResult(loss, norm, stats, lr)


# ----------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    loss: float
    acc: float
    spike_rate: float
    layer_rates: tuple[float, ...]


def evaluate(model: Model, batch, batch_size: int = 100, mode: str = "parallel") -> EvalResult:
    x_all = batch.inputs.values
    y_all = batch.labels
    n = len(y_all)
    loss_sum = 0.0
    correct = 0
    spikes = None
    slots = None
    for lo in range(0, n, batch_size):
        x = x_all[lo : lo + batch_size]
        y = y_all[lo : lo + batch_size]
        loss, stats, tape, _ = forward_loss(model, x, y, mode)
        loss_sum += loss * len(y)
        correct += stats.correct
        s = spike_stats(tape.spikes)
        spikes = np.add(spikes, s.spikes) if spikes is not None else np.array(s.spikes)
        slots = np.add(slots, s.slots) if slots is not None else np.array(s.slots)
    layer_rates = tuple(float(a / b) for a, b in zip(spikes, slots))
    return EvalResult(loss_sum / n, correct / n, float(spikes.sum() / slots.sum()), layer_rates)


# ------------------------------------------------------------ main loop


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(state: TrainState, epoch: int, n: int) -> np.ndarray:
    return state.rng.fork(epoch).permutation(n)


def run_steps(state: TrainState, train, count: int, mode: str = "parallel", dump_dir=None) -> list[StepResult]:
    """Advance ``count`` optimizer steps from wherever ``state.step`` points.

    The batch order is a pure function of (shuffle seed, step), so a run can
    stop and resume at any step boundary.
    """
    cfg = state.config.optimizer
    n = len(train)
    per = steps_per_epoch(n, cfg.batch_size)
    total = per * cfg.epochs
    x_all = train.inputs.values
    out = []
    for _ in range(count):
        epoch, pos = divmod(state.step, per)
        idx = epoch_order(state, epoch, n)[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        out.append(train_step(state, x_all[idx], train.labels[idx], mode, total, dump_dir))
    return out


def train(state: TrainState, train_set, test_set, out_dir=None, mode: str = "parallel", log=None, eval_batch: int = 250) -> list[dict]:
    """Run to the configured epoch count, appending one train and one test
    row per epoch to ``metrics.csv`` in ``out_dir`` when given."""
    cfg = state.config.optimizer
    per = steps_per_epoch(len(train_set), cfg.batch_size)
    writer = None
    fh = None
    if out_dir is not None:
        path = Path(out_dir) / "metrics.csv"
        fresh = not path.exists()
        fh = open(path, "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    t0 = time.perf_counter()
    try:
        while state.step < per * cfg.epochs:
            epoch = state.step // per
            remaining = per - state.step % per
            results = run_steps(state, train_set, remaining, mode, out_dir)
            n_seen = sum(r.stats.count for r in results)
            tr = {
                "epoch": epoch + 1,
                "split": "train",
                "loss": sum(r.loss * r.stats.count for r in results) / n_seen,
                "acc": sum(r.stats.correct for r in results) / n_seen,
                "spike_rate": float(np.mean([r.stats.spike_rate for r in results])),
                "wallclock_s": time.perf_counter() - t0,
            }
            ev = evaluate(state.model, test_set, eval_batch)
            te = {
                "epoch": epoch + 1,
                "split": "test",
                "loss": ev.loss,
                "acc": ev.acc,
                "spike_rate": ev.spike_rate,
                "wallclock_s": time.perf_counter() - t0,
            }
            for row in (tr, te):
                state.history.append(row)
                if writer is not None:
                    writer.writerow([row[c] if not isinstance(row[c], float) else f"{row[c]:.6g}" for c in METRIC_COLUMNS])
            if fh is not None:
                fh.flush()
            if log is not None:
                log(f"epoch {epoch + 1}: train loss {tr['loss']:.4f} acc {tr['acc']:.3f} | "
                    f"test loss {te['loss']:.4f} acc {te['acc']:.3f} rate {te['spike_rate']:.4f}")
    finally:
        if fh is not None:
            fh.close()
    return state.history
