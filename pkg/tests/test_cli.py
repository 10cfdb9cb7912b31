import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from drfnet.analysis import FrequencyResponse, measured_bandwidth
from drfnet.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from drfnet.checkpoint import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.toml")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_dir(out: str) -> Path:
    return Path(out.strip().splitlines()[-1])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    code = main(["train", "--config", SMOKE, "--out", str(base), "--quiet"])
    assert code == EXIT_OK
    (d,) = list(base.iterdir())
    return d


def test_train_smoke_writes_artifacts(smoke_run):
    table = rows(smoke_run / "metrics.csv")
    assert table[0] == ["epoch", "split", "loss", "acc", "spike_rate", "wallclock_s"]
    assert sorted({r[0] for r in table[1:]}) == ["1", "2"]
    assert (smoke_run / "config.toml").is_file()
    assert load_checkpoint(smoke_run / "checkpoint.bin").step == 6


def test_train_is_reproducible(smoke_run, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", SMOKE, "--out", tmp_path, "--quiet")
    assert code == EXIT_OK
    again = rows(run_dir(out) / "metrics.csv")
    first = rows(smoke_run / "metrics.csv")
    assert [r[:5] for r in again] == [r[:5] for r in first]
    assert (run_dir(out) / "checkpoint.bin").read_bytes() == (smoke_run / "checkpoint.bin").read_bytes()


def test_override_is_echoed(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", SMOKE, "--set", "n=8", "--set", "optimizer.epochs=1",
                       "--out", tmp_path, "--quiet")
    assert code == EXIT_OK
    d = run_dir(out)
    assert load_checkpoint(d / "checkpoint.bin").config.n == 8
    assert "n = 8" in (d / "config.toml").read_text()


def test_missing_mnist_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "no-mnist"
    code, _, err = run(capsys, "train", "--set", "task.id=smnist", "--data-dir", missing, "--out", tmp_path)
    assert code == EXIT_DATA
    assert str(missing) in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("task", ["smnist", "psmnist"])
def test_mnist_train_runs_on_pixel_length_grid(tmp_path, capsys, task):
    from test_tasks import write_mnist

    data = tmp_path / "mnist"
    write_mnist(data)
    code, out, _ = run(capsys, "train", "--config", SMOKE, "--set", f"task.id={task}", "--set", "task.classes=10",
                       "--set", "optimizer.epochs=1", "--data-dir", data, "--out", tmp_path / "runs", "--quiet")
    assert code == EXIT_OK
    ckpt = load_checkpoint(run_dir(out) / "checkpoint.bin")
    assert ckpt.config.grid.length == 784


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("n = 0\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out", tmp_path)
    assert code == EXIT_CONFIG and "n" in err
    code, _, _ = run(capsys, "train", "--set", "model.depth=2", "--out", tmp_path)
    assert code == EXIT_CONFIG
    code, _, _ = run(capsys, "train", "--config", tmp_path / "absent.toml", "--out", tmp_path)
    assert code == EXIT_CONFIG
    bad.write_text("widths = [1,\n")
    code, _, _ = run(capsys, "train", "--config", bad, "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_numeric_abort_exits_four(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", SMOKE, "--set", "optimizer.lr=1e300",
                       "--out", tmp_path, "--quiet")
    assert code == EXIT_NUMERIC
    assert "numeric_abort.json" in err


def test_missing_checkpoint_exits_three(tmp_path, capsys):
    for cmd in ("eval", "analyze", "inspect"):
        code, _, err = run(capsys, cmd, "--checkpoint", tmp_path / "none.bin", "--out", tmp_path)
        assert code == EXIT_DATA, cmd
        assert "none.bin" in err
    code, _, _ = run(capsys, "train", "--resume", tmp_path / "none.bin", "--out", tmp_path)
    assert code == EXIT_DATA


def test_corrupt_checkpoint_exits_three(smoke_run, tmp_path, capsys):
    blob = (smoke_run / "checkpoint.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(blob[:-1])
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "cut.bin", "--out", tmp_path)
    assert code == EXIT_DATA and "corrupt" in err


def test_eval_writes_csv(smoke_run, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", smoke_run / "checkpoint.bin", "--out", tmp_path)
    assert code == EXIT_OK
    table = rows(run_dir(out) / "eval.csv")
    assert table[0] == ["split", "loss", "acc", "spike_rate"] and len(table) == 2


def test_analyze_fresh_model_curves(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--config", SMOKE, "--points", 64, "--out", tmp_path)
    assert code == EXIT_OK
    d = run_dir(out)
    table = rows(d / "response.csv")
    assert table[0] == ["Omega", "branch_id_or_aggregate", "magnitude"]
    curves = {r[1] for r in table[1:]}
    assert curves == {"0", "1", "2", "3", "aggregate"}
    assert len(table) - 1 == 5 * 64
    assert len(rows(d / "bandwidth.csv")) == 6
    assert (d / "energy.csv").is_file() and "energy per sample" in (d / "energy.txt").read_text()
    code, out2, _ = run(capsys, "analyze", "--config", SMOKE, "--points", 64, "--out", tmp_path)
    assert (run_dir(out2) / "response.csv").read_bytes() == (d / "response.csv").read_bytes()


@pytest.fixture(scope="module")
def trained_analysis(smoke_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("analysis")
    code = main(["analyze", "--checkpoint", str(smoke_run / "checkpoint.bin"), "--no-energy", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    (d,) = list(out.iterdir())
    curves = {}
    for omega, name, mag in rows(d / "response.csv")[1:]:
        curves.setdefault(name, []).append((float(omega), float(mag)))
    widths = {r[0]: float(r[1]) for r in rows(d / "bandwidth.csv")[1:]}
    return curves, widths


def test_bandwidth_csv_matches_emitted_curves(trained_analysis):
    curves, widths = trained_analysis
    assert widths.keys() == curves.keys()
    for name, pts in curves.items():
        grid, mag = map(np.array, zip(*pts))
        mag = np.maximum(mag, 0.0)
        resp = FrequencyResponse(grid, mag[None, :], mag, mag)
        assert measured_bandwidth(resp).width == pytest.approx(widths[name], rel=1e-6), name


@pytest.mark.xfail(reason="coverage is measured against each curve's own peak; the weighted sum peaks on its "
                          "sharpest high-gain branch, so it is narrower than a broad short-tau branch "
                          "(0 of 28 neurons of a trained multitone model)", strict=False)
def test_trained_aggregate_wider_than_every_branch(trained_analysis):
    _, widths = trained_analysis
    branch = [w for k, w in widths.items() if k != "aggregate"]
    assert widths["aggregate"] > max(branch), widths


def test_analyze_rejects_bad_neuron(tmp_path, capsys):
    code, _, _ = run(capsys, "analyze", "--config", SMOKE, "--layer", 5, "--no-energy", "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_inspect_zero_input_never_spikes(smoke_run, tmp_path, capsys):
    code, out, _ = run(capsys, "inspect", "--checkpoint", smoke_run / "checkpoint.bin", "--zero-input",
                       "--neuron", 3, "--out", tmp_path)
    assert code == EXIT_OK
    table = rows(run_dir(out) / "trace.csv")
    assert table[0] == ["t", "branch", "re", "im", "H", "V_th", "spike"]
    assert len(table) - 1 == 128 * 4
    assert all(r[6] == "0" for r in table[1:])


def test_inspect_sample_trace(smoke_run, tmp_path, capsys):
    code, out, _ = run(capsys, "inspect", "--checkpoint", smoke_run / "checkpoint.bin", "--sample", 2, "--out", tmp_path)
    assert code == EXIT_OK
    table = rows(run_dir(out) / "trace.csv")
    assert any(float(r[2]) != 0.0 for r in table[1:])


def test_bench_quick(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--quick", "--reps", 2, "--warmup", 1, "--threads", 1,
                       "--paths", "sequential_fwd,parallel_fwd,parallel_bwd", "--out", tmp_path, "--quiet")
    assert code == EXIT_OK
    table = rows(run_dir(out) / "bench.csv")
    assert table[0] == ["L", "path", "mean_ms", "std_ms", "reps"]
    assert len(table) - 1 == 2 * 3
    assert all(float(r[2]) > 0 for r in table[1:])
    assert {r[1] for r in table[1:]} == {"sequential_fwd@1t", "parallel_fwd@1t", "parallel_bwd@1t"}


def test_bench_labels_threaded_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--lengths", 256, "--reps", 1, "--warmup", 0, "--threads", 2,
                       "--paths", "parallel_fwd", "--out", tmp_path, "--quiet")
    assert code == EXIT_OK
    labels = [r[1] for r in rows(run_dir(out) / "bench.csv")[1:]]
    assert labels == ["parallel_fwd@1t", "parallel_layer@1t", "parallel_layer@2t"]


def test_bench_unknown_path(tmp_path, capsys):
    code, _, _ = run(capsys, "bench", "--paths", "warp_drive", "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_fetch_from_unreachable_mirror(tmp_path, capsys):
    code, _, err = run(capsys, "fetch", "--data-dir", tmp_path / "d", "--mirror", (tmp_path / "void").as_uri())
    assert code == EXIT_DATA and "fetch failed" in err


def test_resume_only_changes_optimizer(smoke_run, tmp_path, capsys):
    ck = smoke_run / "checkpoint.bin"
    code, _, _ = run(capsys, "train", "--resume", ck, "--set", "n=2", "--out", tmp_path)
    assert code == EXIT_CONFIG
    code, out, _ = run(capsys, "train", "--resume", ck, "--set", "optimizer.epochs=3", "--out", tmp_path, "--quiet")
    assert code == EXIT_OK
    metrics = rows(run_dir(out) / "metrics.csv")
    assert [r[0] for r in metrics[1:]] == ["3", "3"]


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "drfnet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "eval", "analyze", "bench", "inspect", "fetch"):
        assert cmd in proc.stdout
