import json
import os
import subprocess
import sys

import pytest

from cobrapp.cli import main

SMALL = """
[problem]
train = ["sphere:1:2", "discus:2:2"]
test = ["sphere:2:2", "linear_slope:1:2"]

[cobra]
inner_budget = 60
restarts = 2

[dqn]
batch = 8

[train]
epochs = 1
budget = 14

[bench]
algos = ["random", "fixed:0"]
budgets = [14]
repeats = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return str(path)


def test_run_baseline(tmp_path, capsys):
    trace = tmp_path / "out" / "t.csv"
    code = main(["run", "--baseline", "fixed:0", "--problem", "sphere:1:2", "--budget", "30",
                 "--seed", "1", "--trace", str(trace)])
    assert code == 0
    out = capsys.readouterr().out
    assert "best_f=" in out and "feasible=" in out and "RI=" in out
    assert "steps=24" in out and "fes=30" in out
    assert len(trace.read_text().splitlines()) == 1 + 24
    assert (tmp_path / "out" / "t.config.toml").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--baseline", "fixed:11", "--problem", "sphere:1:2", "--budget", "20"],
    ["run", "--baseline", "fixed:0", "--problem", "ackley:1:2", "--budget", "20"],
    ["run", "--problem", "sphere:1:2"],
    ["train", "--config", "/nonexistent/desk.toml"],
    ["bench", "--algos", ",", "--suite", "sphere:1:2"],
    ["bench", "--algos", "learned", "--suite", "sphere:1:2"],
    ["report", "--runs", "/nonexistent"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] == "bench" else [])) == 2


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nepoks = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("[nonsense]\nx = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_budget_not_above_n0(tmp_path):
    cfg = tmp_path / "n0.toml"
    cfg.write_text("[cobra]\nn0 = 20\n")
    argv = ["run", "--config", str(cfg), "--baseline", "fixed:0", "--problem", "sphere:1:2"]
    assert main(argv + ["--budget", "20"]) == 2
    assert main(argv + ["--budget", "22"]) == 0


def test_train_deterministic_and_snapshot(tmp_path, config):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", config, "--seed", "42", "--out", str(out)]) == 0
    a, b = (o / "policy.json" for o in outs)
    assert a.read_bytes() == b.read_bytes()
    for o in outs:
        assert (o / "config.toml").exists() and (o / "epochs.csv").exists()


def test_train_zero_epochs(tmp_path, config):
    assert main(["train", "--config", config, "--epochs", "0", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "policy.json").read_text())["meta"]
    assert meta["epochs"] == 0


def test_schema_mismatch_policy(tmp_path, config):
    assert main(["train", "--config", config, "--epochs", "0", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "policy.json").read_text())
    doc["feature_schema"] = "v0"
    old = tmp_path / "old.json"
    old.write_text(json.dumps(doc))
    assert main(["run", "--policy", str(old), "--problem", "sphere:1:2", "--budget", "14"]) == 2
    assert main(["run", "--policy", str(tmp_path / "policy.json"), "--problem", "sphere:1:2",
                 "--budget", "14"]) == 0


def test_bench_and_report(tmp_path, config):
    policy_dir = tmp_path / "train"
    assert main(["train", "--config", config, "--epochs", "0", "--out", str(policy_dir)]) == 0
    policy = str(policy_dir / "policy.json")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["bench", "--config", config, "--algos", "learned,random,fixed:0",
                     "--policy", policy, "--out", str(out)]) == 0
        runs.append(out)
    a, b = runs
    for f in ("report.csv", "ranks.csv", "phase_freq.csv", "runs.csv", "table.txt", "config.toml"):
        assert (a / f).exists()
        assert (a / f).read_bytes() == (b / f).read_bytes() or f == "config.toml"
    assert len(os.listdir(a / "traces")) == 2 * 3
    report = (a / "report.csv").read_text()
    (a / "report.csv").unlink()
    assert main(["report", "--runs", str(a)]) == 0
    assert (a / "report.csv").read_text() == report


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cobrapp", "run", "--baseline", "fixed:99",
                          "--problem", "sphere:1:2"], capture_output=True, text=True)
    assert res.returncode == 2
    assert "error" in res.stderr
