import csv
import json
import subprocess
import sys

import pytest

from fedcoe.cli import main

TINY = ["--set", "num_clients=4", "--set", "num_experts=2", "--set", "num_classes=4", "--set", "input_dim=6",
        "--set", "samples_per_class=40", "--set", "test_samples_per_class=30", "--set", "pretrain_epochs=5",
        "--set", "min_client_size=4"]  # fmt: skip


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{}")
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fedavg_smoke(tmp_path, config):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out), "--set", "method=fedavg", "--set", "rounds=1", *TINY]) == 0
    rows = _rows(out / "metrics.csv")
    assert len(rows) == 2 and rows[0][0] == "round"
    assert (out / "metrics.png").stat().st_size > 0
    assert (out / "checkpoints" / "global.ckpt").exists()
    assert json.loads((out / "config.json").read_text())["method"] == "fedavg"


def test_run_twice_identical(tmp_path, config):
    args = ["run", "--config", str(config), "--set", "rounds=3", *TINY]
    assert main(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "4"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_run_writes_moe_checkpoints_and_dumps(tmp_path, config):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out), "--set", "rounds=2", "--dump-correlation", *TINY]) == 0
    assert (out / "checkpoints" / "gate.ckpt").exists()
    assert (out / "checkpoints" / "pool" / "manifest.json").exists()
    assert len(list((out / "checkpoints" / "clients").glob("*.ckpt"))) == 4
    assert sorted(p.name for p in (out / "correlation").iterdir()) == ["round_0001.csv", "round_0002.csv"]


def test_coldstart_command(tmp_path, config):
    run = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(run), "--set", "rounds=2", *TINY]) == 0
    assert main(["synth-clients", "--config", str(config), "--out", str(tmp_path / "new"), "--count", "2", *TINY]) == 0
    files = sorted(str(p) for p in (tmp_path / "new").glob("*.bin"))
    out = tmp_path / "cs"
    assert main(["coldstart", "--run", str(run), "--clients", *files, "--out", str(out)]) == 0
    rows = _rows(out / "coldstart.csv")
    assert rows[0] == ["client", "mode", "samples", "accuracy"] and len(rows) == 3
    assert all(r[1] == "assembled" for r in rows[1:])
    traces = json.loads((out / "protocol_trace.json").read_text())
    assert all(t["payloads"] == ["gate", "profile", "model"] for t in traces)
    assert (out / "coldstart.png").exists()


def test_coldstart_baseline_uses_global(tmp_path, config):
    run = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(run), "--set", "rounds=2", "--set", "method=fedprox", *TINY]) == 0
    assert main(["synth-clients", "--out", str(tmp_path / "new"), "--count", "2", *TINY]) == 0
    files = sorted(str(p) for p in (tmp_path / "new").glob("*.bin"))
    assert main(["coldstart", "--run", str(run), "--clients", *files, "--out", str(tmp_path / "cs")]) == 0
    assert all(r[1] == "global" for r in _rows(tmp_path / "cs" / "coldstart.csv")[1:])


def test_sweep_fans_out(tmp_path, config):
    out = tmp_path / "sweep"
    base = ["--set", "num_clients=4", "--set", "num_classes=4", "--set", "input_dim=6", "--set", "samples_per_class=40",
            "--set", "test_samples_per_class=30", "--set", "pretrain_epochs=5", "--set", "min_client_size=4"]  # fmt: skip
    assert main(["sweep", "--config", str(config), "--grid", "num_experts=2,3,4", "--out", str(out), "--set", "rounds=1", *base]) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["num_experts=2", "num_experts=3", "num_experts=4"]
    ks = {json.loads((out / d / "config.json").read_text())["num_experts"] for d in dirs}
    assert ks == {2, 3, 4}
    assert len(_rows(out / "summary.csv")) == 4
    assert (out / "sweep.png").exists()


def test_config_error_exit_code(tmp_path, config, capsys):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "x"), "--set", "alpha_dirichlet=-1"]) == 2
    assert "alpha_dirichlet" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().err


def test_run_stays_inside_out_dir(tmp_path, config):
    before = set(tmp_path.iterdir())
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "only"), "--set", "rounds=1", *TINY]) == 0
    assert set(tmp_path.iterdir()) - before == {tmp_path / "only"}


def test_verify_command_exit_zero():
    proc = subprocess.run([sys.executable, "-m", "fedcoe", "verify"], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert proc.stdout.count("PASS") == 8 and "FAIL" not in proc.stdout
