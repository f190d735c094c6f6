"""End-to-end runner and CLI tests on a tiny synthetic config.

Run with: pytest tests/test_cli.py
"""
import json
import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.append(os.getcwd())

import advfedkd.federation as federation
from advfedkd.cli import main
from advfedkd.config import load_config, override
from advfedkd.federation import METHODS
from advfedkd.models import load_params, param_count
from advfedkd.runner import evaluate_checkpoint, run_experiment

TINY = """
seed = 1
data.num_classes = 3
data.dim = 4
data.n_per_class = 30
data.spread = 0.1
model.student_hidden = [6]
model.teacher_hidden = [8]
fed.rounds = 6
fed.batch_size = 16
partition.num_clients = 2
partition.concentration = 1.0
partition.min_shard_size = 5
attack.train.epsilon = 0.1
attack.train.step_size = 0.05
attack.train.iterations = 2
attack.eval.fgsm.kind = "fgsm"
attack.eval.fgsm.epsilon = 0.1
attack.eval.pgd5.kind = "pgd"
attack.eval.pgd5.epsilon = 0.1
attack.eval.pgd5.step_size = 0.03
attack.eval.pgd5.iterations = 5
teacher.epochs = 2
eval.every = 1
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def tiny(config_path, out, **overrides):
    cfg = override(load_config(config_path), "output.dir", str(out))
    for key, value in overrides.items():
        cfg = override(cfg, key, value)
    return cfg


def test_run_writes_all_outputs(config_path, tmp_path):
    result = run_experiment(tiny(config_path, tmp_path / "run"))
    for name in ("metrics.csv", "summary.json", "config.json", "global.ckpt", "teacher.ckpt"):
        assert (result.out_dir / name).is_file(), name
    assert load_params(result.out_dir / "global.ckpt").equals(result.history.final_params)


def test_summary_matches_last_five_rows(config_path, tmp_path):
    result = run_experiment(tiny(config_path, tmp_path / "run"))
    frame = pd.read_csv(result.out_dir / "metrics.csv")
    summary = json.loads((result.out_dir / "summary.json").read_text())
    assert len(frame) == 6
    assert summary["clean_accuracy"] == pytest.approx(frame["clean_acc"].tail(5).mean(), abs=1e-9)
    assert summary["average_robust"] == pytest.approx(frame["avg_robust"].tail(5).mean(), abs=1e-9)
    for name in ("fgsm", "pgd5"):
        assert summary["robust_accuracies"][name] == pytest.approx(frame[f"robust_{name}"].tail(5).mean(), abs=1e-9)


def test_comm_params_depend_only_on_student(config_path, tmp_path):
    small = run_experiment(tiny(config_path, tmp_path / "a"))
    big = run_experiment(tiny(config_path, tmp_path / "b", **{"model.teacher_hidden": [32, 32]}))
    assert small.summary["comm_params_per_round"] == big.summary["comm_params_per_round"]
    assert small.summary["comm_params_per_round"] == 2 * 2 * param_count(small.history.final_params.spec)


def test_single_thread_runs_are_byte_identical(config_path, tmp_path):
    a = run_experiment(tiny(config_path, tmp_path / "a"))
    b = run_experiment(tiny(config_path, tmp_path / "b"))
    c = run_experiment(tiny(config_path, tmp_path / "c", **{"fed.threads": 4}))
    first = (a.out_dir / "metrics.csv").read_bytes()
    assert first == (b.out_dir / "metrics.csv").read_bytes()
    assert first == (c.out_dir / "metrics.csv").read_bytes()


def test_method_matrix_emits_one_summary_each(config_path, tmp_path):
    paths = []
    for method in METHODS:
        result = run_experiment(tiny(config_path, tmp_path / method, **{"fed.method": method, "fed.rounds": 1}))
        paths.append(result.out_dir / "summary.json")
    assert all(p.is_file() for p in paths)
    assert main(["compare", *map(str, paths), "--output", str(tmp_path / "table.csv")]) == 0
    assert len(pd.read_csv(tmp_path / "table.csv")) == len(METHODS)


def test_partial_metrics_flushed_on_failure(config_path, tmp_path, monkeypatch):
    real = federation.local_update

    def failing(*args, round_index=None, **kwargs):
        if round_index == 3:
            raise FloatingPointError("boom")
        return real(*args, round_index=round_index, **kwargs)

    monkeypatch.setattr(federation, "local_update", failing)
    out = tmp_path / "run"
    with pytest.raises(FloatingPointError):
        run_experiment(tiny(config_path, out, **{"fed.method": "fedavg"}))
    assert len(pd.read_csv(out / "metrics.csv")) == 2


def test_rounds_to_target_reported(config_path, tmp_path):
    result = run_experiment(tiny(config_path, tmp_path / "run", **{"eval.target_clean_accuracy": 0.0}))
    assert result.summary["rounds_to_target"] == 1


def test_cli_run_and_eval(config_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_path), "--out", str(out), "--threads", "1", "--seed", "5"]) == 0
    assert "RESULT" in capsys.readouterr().out
    assert json.loads((out / "config.json").read_text())["seed"] == 5
    assert main(["eval", "--config", str(config_path), "--checkpoint", str(out / "global.ckpt"),
                 "--output", str(tmp_path / "eval.json")]) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert set(report["robust_accuracies"]) == {"fgsm", "pgd5"}


def test_cli_pretrain_then_load_teacher(config_path, tmp_path):
    out = tmp_path / "teacher"
    assert main(["pretrain-teacher", "--config", str(config_path), "--out", str(out)]) == 0
    report = json.loads((out / "teacher.json").read_text())
    assert 0.0 <= report["clean_accuracy"] <= 100.0
    cfg = tiny(config_path, tmp_path / "run", **{"teacher.load": str(out / "teacher.ckpt"), "fed.rounds": 1})
    result = run_experiment(cfg)
    assert not (result.out_dir / "teacher.ckpt").exists()


def test_eval_matches_runner(config_path, tmp_path):
    cfg = tiny(config_path, tmp_path / "run")
    result = run_experiment(cfg)
    row = evaluate_checkpoint(cfg, result.out_dir / "global.ckpt")
    assert 0.0 <= row.clean_accuracy <= 100.0
    assert row.average_robust == pytest.approx(np.mean(list(row.robust_accuracies.values())))


def test_cli_config_error_exit_status(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("fed.rounds = -3\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "fed.rounds" in capsys.readouterr().err


def test_cli_sweep(config_path, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config_path), "--out", str(out),
                 "--key", "distill.rho", "--values", "1.0", "5.0"]) == 0
    table = pd.read_csv(out / "comparison.csv")
    assert len(table) == 2
    assert (out / "distill.rho=5.0" / "summary.json").is_file()


def test_avg_robust_is_exact_mean_of_attack_columns(config_path, tmp_path):
    attacks = {
        "fgsm": {"kind": "fgsm", "epsilon": 0.1, "step_size": 0.1, "iterations": 1, "random_start": False},
        "bim3": {"kind": "bim", "epsilon": 0.1, "step_size": 0.04, "iterations": 3},
        "pgd5": {"kind": "pgd", "epsilon": 0.1, "step_size": 0.03, "iterations": 5},
    }
    result = run_experiment(tiny(config_path, tmp_path / "run", **{"fed.method": "fedpgd", "attack.eval": attacks}))
    frame = pd.read_csv(result.out_dir / "metrics.csv")
    columns = [f"robust_{name}" for name in attacks]
    gap = (frame["avg_robust"] - frame[columns].mean(axis=1)).abs().max()
    assert gap <= 1e-9
