"""Command-line entry point: train, eval, analyze, bench, inspect, fetch.

Exit codes: 0 success, 2 configuration error, 3 data error (missing dataset,
missing or corrupt checkpoint), 4 numeric abort. Failures print one line on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import os
import sys
import urllib.error
from pathlib import Path

import numpy as np

from . import analysis, bench
from .autograd import network_forward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import ConfigError, MissingFile, RunConfig, apply_overrides, load_config, save_config
from .dynamics import DendriticParams
from .tasks import DATA_ROOT_ENV, DataError, fetch_mnist, load_task
from .trainer import NumericAbort, evaluate, new_state, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(config, getattr(args, "set", None) or [])


def _run_dir(args, command: str) -> Path:
    root = Path(args.out or "runs")
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = root / f"{stamp}-{command}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _data_dir(args, config: RunConfig):
    return getattr(args, "data_dir", None) or os.environ.get(DATA_ROOT_ENV) or config.task.data_dir


def _load_state(path):
    try:
        return load_checkpoint(path)
    except MissingFile as err:
        raise CommandError(EXIT_DATA, f"checkpoint not found: {err.path}") from None


def _state_or_fresh(args):
    """Checkpointed state when --checkpoint is given, else a fresh model from the config."""
    if args.checkpoint:
        state = _load_state(args.checkpoint)
        if args.set:
            raise CommandError(EXIT_CONFIG, "--set cannot change a checkpointed model")
        return state
    config = _resolve_config(args)
    channels = 1
    classes = config.task.classes if config.task.id == "multitone" else 10
    return new_state(config, channels, classes)


# -------------------------------------------------------------- commands


def cmd_train(args) -> int:
    if args.resume:
        state = _load_state(args.resume)
        config = state.config
        if args.set:
            config = apply_overrides(config, args.set)
            if config.replace(optimizer=state.config.optimizer) != state.config:
                raise CommandError(EXIT_CONFIG, "only optimizer.* may change on resume")
            state.config = config
    else:
        config = _resolve_config(args)
        state = None
    train_set, test_set, spec = load_task(config, _data_dir(args, config))
    if state is None:
        classes = spec.classes if spec.id == "multitone" else 10
        state = new_state(config, train_set.inputs.shape[1], classes)
    out = _run_dir(args, "train")
    save_config(config, out / "config.toml")
    log = None if args.quiet else (lambda m: print(m, flush=True))
    try:
        train(state, train_set, test_set, out, mode=args.mode, log=log)
    finally:
        save_checkpoint(state, out / "checkpoint.bin")
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args.checkpoint)
    config = state.config
    _, test_set, _ = load_task(config, _data_dir(args, config))
    res = evaluate(state.model, test_set, args.batch_size)
    out = _run_dir(args, "eval")
    save_config(config, out / "config.toml")
    rows = [["test", f"{res.loss:.6g}", f"{res.acc:.6g}", f"{res.spike_rate:.6g}"]]
    _write_csv(out / "eval.csv", ["split", "loss", "acc", "spike_rate"], rows)
    print(f"test loss {res.loss:.4f} acc {res.acc:.4f} spike_rate {res.spike_rate:.4f}")
    print(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    state = _state_or_fresh(args)
    model = state.model
    config = state.config
    l, j = args.layer, args.neuron
    if not (0 <= l < model.depth and 0 <= j < model.widths[l]):
        raise CommandError(EXIT_CONFIG, f"no neuron {j} in layer {l}")
    dp = model.dendritic(l)
    one = DendriticParams(dp.tau[j], dp.omega[j], dp.gamma[j])
    resp = analysis.drf_response(one, model.p(l, "c")[j], model.grid, analysis.omega_grid(args.points))
    out = _run_dir(args, "analyze")
    save_config(config, out / "config.toml")
    rows = []
    for i in range(resp.n):
        rows += [[f"{w:.9g}", str(i), f"{m:.9g}"] for w, m in zip(resp.omega_grid, resp.branches[i])]
    rows += [[f"{w:.9g}", "aggregate", f"{m:.9g}"] for w, m in zip(resp.omega_grid, resp.aggregate_raw)]
    _write_csv(out / "response.csv", ["Omega", "branch_id_or_aggregate", "magnitude"], rows)

    bw_rows = []
    curves = [(str(i), resp.branch(i)) for i in range(resp.n)] + [("aggregate", resp)]
    for name, r in curves:
        try:
            bw = analysis.measured_bandwidth(r)
        except analysis.DegenerateResponse:
            bw_rows.append([name, "0", "0", ""])
            continue
        spans = ";".join(f"{a:.6g}-{b:.6g}" for a, b in bw.intervals)
        bw_rows.append([name, f"{bw.width:.9g}", f"{bw.peak:.9g}", spans])
    _write_csv(out / "bandwidth.csv", ["curve", "width", "peak", "intervals"], bw_rows)

    if not args.no_energy:
        try:
            _, test_set, _ = load_task(config, _data_dir(args, config))
        except (DataError, MissingFile) as err:
            raise CommandError(EXIT_DATA, str(err)) from None
        x = test_set.inputs.values[: args.energy_samples]
        tape = network_forward(model, x)
        rep = analysis.model_energy(model, tape.spikes, x.shape[0])
        _write_csv(out / "energy.csv", ["spike_rate", "synaptic_ops", "dense_macs", "energy_j"],
                   [[f"{rep.spike_rate:.6g}", f"{rep.synaptic_ops:.6g}", f"{rep.dense_macs:.6g}", f"{rep.energy_j:.6g}"]])
        lines = [f"samples: {x.shape[0]}", f"spike rate: {rep.spike_rate:.6f}",
                 f"synaptic ops per sample: {rep.synaptic_ops:.1f}",
                 f"dense MACs per sample: {rep.dense_macs:.1f}",
                 f"energy per sample: {rep.energy_j:.6e} J"]
        lines += [f"layer {i} accumulate energy: {e:.6e} J" for i, e in enumerate(rep.per_layer_j)]
        (out / "energy.txt").write_text("\n".join(lines) + "\n")
    print(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else list(bench.DEFAULT_LADDER)
    if args.quick:
        lengths = lengths[:2]
    paths = args.paths.split(",") if args.paths else list(bench.PATHS)
    unknown = [p for p in paths if p not in bench.PATHS]
    if unknown:
        raise CommandError(EXIT_CONFIG, f"unknown bench path(s): {', '.join(unknown)}")
    threads = args.threads if args.threads is not None else bench.default_threads()
    log = None if args.quiet else (lambda m: print(m, flush=True))
    rows = bench.run_bench(lengths, paths, args.reps, args.warmup, threads, args.bptt_max, log=log)
    out = _run_dir(args, "bench")
    _write_csv(out / "bench.csv", bench.BENCH_COLUMNS, [r.as_list() for r in rows])
    print(out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = _state_or_fresh(args)
    model = state.model
    config = state.config
    l, j = args.layer, args.neuron
    if not (0 <= l < model.depth and 0 <= j < model.widths[l]):
        raise CommandError(EXIT_CONFIG, f"no neuron {j} in layer {l}")
    L = model.grid.length
    if args.zero_input:
        x = np.zeros((1, model.input_channels, L), dtype=model.dtype)
    else:
        try:
            _, test_set, _ = load_task(config, _data_dir(args, config))
        except (DataError, MissingFile) as err:
            raise CommandError(EXIT_DATA, str(err)) from None
        x = test_set.inputs.values[args.sample : args.sample + 1]
    tape = network_forward(model, x, mode="sequential")
    node = tape.layers[l]
    Z = node.saved["states"][0, j]
    H = node.saved["H"][0, j]
    V = node.saved["V_th"][0, j]
    S = node.saved["S"][0, j]
    rows = []
    for t in range(L):
        for i in range(model.n):
            rows.append([t, i, f"{Z[i, t].real:.9g}", f"{Z[i, t].imag:.9g}", f"{H[t]:.9g}", f"{V[t]:.9g}", int(S[t])])
    out = _run_dir(args, "inspect")
    save_config(config, out / "config.toml")
    _write_csv(out / "trace.csv", ["t", "branch", "re", "im", "H", "V_th", "spike"], rows)
    print(out)
    return EXIT_OK


def cmd_fetch(args) -> int:
    config = _resolve_config(args)
    target = _data_dir(args, config)
    try:
        files = fetch_mnist(target, args.mirror)
    except (urllib.error.URLError, OSError) as err:
        raise CommandError(EXIT_DATA, f"fetch failed: {err}") from None
    for f in files:
        print(f)
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drfnet", description="Dendritic resonate-and-fire sequence models")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML run config")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config key (dotted path); repeatable")
        sp.add_argument("--out", help="parent directory for the timestamped run directory (default: runs)")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: machine cores)")
        sp.add_argument("--data-dir", help=f"dataset directory (else ${DATA_ROOT_ENV}, else task.data_dir)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--batch-size", type=int, default=250)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("analyze", help="frequency responses, bandwidth and energy")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--neuron", type=int, default=0)
    sp.add_argument("--points", type=int, default=analysis.GRID_POINTS)
    sp.add_argument("--no-energy", action="store_true", help="skip the forward pass for the energy report")
    sp.add_argument("--energy-samples", type=int, default=100)
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("bench", help="runtime against sequence length")
    common(sp, config=False)
    sp.add_argument("--lengths", help="comma-separated ladder (default 1024..16384)")
    sp.add_argument("--paths", help=f"comma-separated subset of {','.join(bench.PATHS)}")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--bptt-max", type=int, default=512)
    sp.add_argument("--quick", action="store_true", help="first two ladder entries only")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("inspect", help="per-branch trace of one neuron")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--neuron", type=int, default=0)
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--zero-input", action="store_true")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("fetch", help="download the MNIST IDX files")
    common(sp)
    sp.add_argument("--mirror", help="base URL (else $DRF_MNIST_MIRROR)")
    sp.set_defaults(fn=cmd_fetch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CommandError as err:
        code, msg = err.code, str(err)
    except (CheckpointError, DataError) as err:
        code, msg = EXIT_DATA, str(err)
    except MissingFile as err:
        # a missing config file is a config problem; anything else is data
        is_config = str(err.path) == str(getattr(args, "config", None))
        code, msg = (EXIT_CONFIG if is_config else EXIT_DATA), str(err)
    except ConfigError as err:
        code, msg = EXIT_CONFIG, str(err)
    except NumericAbort as err:
        code, msg = EXIT_NUMERIC, str(err)
    print(f"drfnet {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
