"""Runtime measurements for the sequential and parallel paths."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .autograd import bptt_backward, cross_entropy, network_backward, network_forward
from .core import RunConfig, TaskConfig, make_rng
from .network import init_model
from .parallel import drf_parallel_forward

DEFAULT_LADDER = (1024, 2048, 4096, 8192, 16384)
BENCH_COLUMNS = ("L", "path", "mean_ms", "std_ms", "reps")
PATHS = ("sequential_fwd", "parallel_fwd", "bptt_bwd", "parallel_bwd", "sequential_step", "parallel_step")


@dataclass(frozen=True)
class BenchShape:
    batch: int = 2
    channels: int = 1
    width: int = 4
    n: int = 4
    n_a: int = 3
    classes: int = 2
    seed: int = 0


@dataclass(frozen=True)
class BenchRow:
    L: int
    path: str
    mean_ms: float
    std_ms: float
    reps: int

    def as_list(self):
        return [self.L, self.path, f"{self.mean_ms:.4f}", f"{self.std_ms:.4f}", self.reps]


def time_call(fn, reps: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Mean and standard deviation of wall time in milliseconds."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(samples)), float(np.std(samples))


def bench_model(L: int, shape: BenchShape = BenchShape()):
    cfg = RunConfig(seed=shape.seed, n=shape.n, n_a=shape.n_a, widths=(shape.width,),
                    task=TaskConfig(length=L, classes=shape.classes))
    rng = make_rng(shape.seed)
    model = init_model(cfg, shape.channels, shape.classes, rng.fork(1))
    x = rng.fork(2).normal((shape.batch, shape.channels, L))
    labels = np.arange(shape.batch) % shape.classes
    return model, x, labels


def path_callables(L: int, shape: BenchShape = BenchShape(), threads: int = 1):
    """Zero-argument callables for every benchmark path at length L.

    Parallel paths bump the parameter version first, so each call rebuilds
    the kernel spectra exactly as a training step would.
    """
    model, x, labels = bench_model(L, shape)

    def seq_fwd():
        return network_forward(model, x, mode="sequential")

    def par_fwd():
        model.bump_version()
        return network_forward(model, x, mode="parallel")

    seq_tape = None
    par_tape = None

    def bptt_bwd():
        nonlocal seq_tape
        if seq_tape is None:
            seq_tape = seq_fwd()
        _, g = cross_entropy(seq_tape.scores, labels)
        return bptt_backward(model, seq_tape, g)

    def par_bwd():
        nonlocal par_tape
        if par_tape is None:
            par_tape = par_fwd()
        _, g = cross_entropy(par_tape.scores, labels)
        return network_backward(model, par_tape, g)

    def seq_step():
        tape = seq_fwd()
        _, g = cross_entropy(tape.scores, labels)
        return bptt_backward(model, tape, g)

    def par_step():
        tape = par_fwd()
        _, g = cross_entropy(tape.scores, labels)
        return network_backward(model, tape, g)

    out = {
        "sequential_fwd": seq_fwd,
        "parallel_fwd": par_fwd,
        "bptt_bwd": bptt_bwd,
        "parallel_bwd": par_bwd,
        "sequential_step": seq_step,
        "parallel_step": par_step,
    }
    if threads > 1:
        w = model.p(0, "w")
        drive = np.matmul(w, x)

        def par_layer_threaded():
            return drf_parallel_forward(drive, model.dendritic(0), model.soma(0), model.grid, threads=threads)

        def par_layer_single():
            return drf_parallel_forward(drive, model.dendritic(0), model.soma(0), model.grid, threads=1)

        out["parallel_layer"] = par_layer_single
        out["parallel_layer_mt"] = par_layer_threaded
    return out


def run_bench(lengths=DEFAULT_LADDER, paths=PATHS, reps: int = 5, warmup: int = 2,
              threads: int = 1, bptt_max: int = 512, shape: BenchShape = BenchShape(), log=None) -> list[BenchRow]:
    """Rows of (L, path, mean_ms, std_ms, reps).

    Path labels carry their thread count (``@1t`` / ``@<k>t``). ``bptt_bwd``
    is measured only up to ``bptt_max``; ``sequential_step`` always runs.
    """
    rows = []
    for L in lengths:
        calls = path_callables(L, shape, threads)
        wanted = list(paths)
        if threads > 1:
            wanted += ["parallel_layer", "parallel_layer_mt"]
        for p in wanted:
            if p == "bptt_bwd" and L > bptt_max:
                continue
            mean, std = time_call(calls[p], reps, warmup)
            t = threads if p.endswith("_mt") else 1
            label = f"{p.removesuffix('_mt')}@{t}t"
            rows.append(BenchRow(L, label, mean, std, reps))
            if log is not None:
                log(f"L={L:6d} {label:22s} {mean:10.3f} ms ± {std:.3f}")
    return rows


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(L)."""
    return float(np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(times, float)), 1)[0])


def default_threads() -> int:
    return os.cpu_count() or 1
