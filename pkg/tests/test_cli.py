import json
import os
import subprocess
import sys

import pytest

from safegrid.cli import main
from safegrid.config import load_config
from safegrid.harness import DatasetManifest, read_metrics_csv

SMALL = """
[run]
seeds = 0
[dataset]
n_train_maps = 8
n_eval_maps = 4
[policy]
n_updates = 1
batch_steps = 120
n_envs = 6
[eval]
fine_tune_updates = 1
eval_episodes = 12
"""


@pytest.fixture
def run_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture
def data(tmp_path, run_cfg):
    out = tmp_path / "data"
    assert main(["gen-dataset", "--config", str(run_cfg), "--seed", "1", "--out", str(out)]) == 0
    return out


def test_gen_dataset_example(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-dataset", "--seed", "1", "--train-maps", "200", "--eval-maps", "50", "--out", str(out)]) == 0
    train_m = DatasetManifest.load(out / "train.jsonl")
    eval_m = DatasetManifest.load(out / "eval.jsonl")
    assert len(train_m.entries) == 200 and len(eval_m.entries) == 50
    assert sorted(p.name for p in out.iterdir()) == ["config.cfg", "eval.jsonl", "train.jsonl"]
    assert load_config((out / "config.cfg").read_text()).seed == 1


def test_effective_config_reproduces_the_run(tmp_path, run_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-dataset", "--config", str(run_cfg), "--set", "dataset.n_train_maps=5", "--out", str(a)]) == 0
    assert main(["gen-dataset", "--config", str(a / "config.cfg"), "--out", str(b)]) == 0
    assert (a / "config.cfg").read_text() == (b / "config.cfg").read_text()
    assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()


def test_train_twice_is_byte_identical(tmp_path, run_cfg, data):
    outs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        argv = ["train", "--config", str(run_cfg), "--manifest", str(data / "train.jsonl"),
                "--interpreter", "oracle", "--out", str(out)]
        assert main(argv) == 0
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    rows = read_metrics_csv(outs[0] / "metrics.csv")
    assert {r["algo"] for r in rows} == {"polco"} and any(r["seed"] == "median" for r in rows)
    assert (outs[0] / "policy_seed0.npz").exists() and (outs[0] / "log_seed0.csv").exists()


def test_pipeline_and_report(tmp_path, run_cfg, data):
    cfg = ["--config", str(run_cfg)]
    runs = tmp_path / "runs"
    assert main(["train", *cfg, "--manifest", str(data / "train.jsonl"), "--interpreter", "oracle",
                 "--out", str(runs / "train")]) == 0
    assert main(["eval-transfer", *cfg, "--manifest", str(data / "eval.jsonl"), "--policies", str(runs / "train"),
                 "--interpreter", "oracle", "--out", str(runs / "transfer")]) == 0
    assert main(["baseline", *cfg, "--kind", "cf_trpo", "--manifest", str(data / "train.jsonl"),
                 "--eval-manifest", str(data / "eval.jsonl"), "--out", str(runs / "cf")]) == 0
    assert main(["eval-multi", *cfg, "--policies", str(runs / "train"), "--interpreter", "oracle",
                 "--constraint", "budget(entity=lava, max=2)", "--constraint", "relation(entity=water, distance=1)",
                 "--out", str(runs / "multi")]) == 0
    summary = json.loads((runs / "multi" / "summary.json").read_text())
    assert len(summary["per_spec"]["0"]) == 2

    assert main(["report", "--in", str(runs), "--out", str(runs / "summary.csv")]) == 0
    table = read_metrics_csv(runs / "summary.csv")
    assert {r["algo"] for r in table} == {"polco", "cf_trpo", "polco_multi"}
    assert all(r["seed"] == "median" for r in table)
    splits = {(r["algo"], r["split"]) for r in table}
    assert ("polco", "eval") in splits and ("polco", "train") in splits


def test_train_interpreter_command(tmp_path, run_cfg, data):
    out = tmp_path / "interp"
    argv = ["train-interpreter", "--config", str(run_cfg), "--set", "interp_trajectories=20",
            "--set", "interp_epochs=1", "--manifest", str(data / "train.jsonl"),
            "--eval-manifest", str(data / "eval.jsonl"), "--out", str(out)]
    assert main(argv) == 0
    report = json.loads((out / "interpreter_metrics.json").read_text())
    assert 0 <= report["heldout"]["mask_accuracy"] <= 1
    assert (out / "interpreter.npz").exists()


@pytest.mark.parametrize(
    "argv, message",
    [
        (["train", "--manifest", "missing.jsonl"], "manifest not found"),
        (["gen-dataset", "--set", "nonsense=1"], "unknown key"),
        (["gen-dataset", "--set", "grid_size=big"], "bad value"),
        (["eval-multi", "--policies", ".", "--interpreter", "oracle", "--constraint", "budget(entity=lava, max=1)"],
         "at least two"),
        (["report", "--in", "nowhere"], "in not found"),
    ],
)
def test_errors_exit_nonzero(tmp_path, capsys, argv, message):
    assert main([*argv, "--out", str(tmp_path / "o")]) == 1
    assert message in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[policy]\nalgo = sgd\n")
    assert main(["gen-dataset", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "unknown algorithm" in capsys.readouterr().err
    assert main(["gen-dataset", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAFEGRID_OUT", str(tmp_path / "envroot"))
    assert main(["gen-dataset", "--train-maps", "3", "--eval-maps", "2"]) == 0
    assert (tmp_path / "envroot" / "train.jsonl").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "safegrid.cli", "--version"], capture_output=True, text=True,
                          env={**os.environ, "SAFEGRID_OUT": str(tmp_path)})
    assert proc.returncode == 0 and proc.stdout.strip() == "0.1.0"
