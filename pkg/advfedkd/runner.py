"""Experiment orchestration behind the CLI subcommands."""

from __future__ import annotations
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .config import SEED_DATA, SEED_EVAL, SEED_TEACHER, ExperimentConfig, override
from .data import Dataset, load_idx, split, synth_gaussian_mixture
from .exceptions import ConfigError
from .export import (
    MetricsRow,
    build_summary,
    compare_runs,
    write_comparison,
    write_json,
    write_metrics_csv,
)
from .federation import RoundRecord, RunHistory, communication_cost, run_rounds
from .metrics import evaluate_clean, evaluate_robust
from .models import ModelParams, Teacher, load_params, pretrain_teacher, save_params

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class ExperimentResult:
    out_dir: Path
    history: RunHistory
    rows: List[MetricsRow]
    summary: Dict


def build_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) for the configured source; deterministic in the master seed."""
    d = config.data
    seed = config.sub_seed(SEED_DATA)
    if d.source == "synthetic":
        full = synth_gaussian_mixture(d.num_classes, d.dim, d.n_per_class, d.spread, seed)
        return split(full, d.test_fraction, seed)
    train = load_idx(d.train_images, d.train_labels, limit=d.limit)
    if d.test_images is None:
        return split(train, d.test_fraction, seed)
    test = load_idx(d.test_images, d.test_labels, limit=d.test_limit, num_classes=train.num_classes)
    return train, test


def _check_spec(params: ModelParams, train: Dataset, source: str) -> None:
    spec = params.spec
    if spec.input_dim != train.dim or spec.num_classes != train.num_classes:
        raise ConfigError([(
            "teacher.load",
            f"{source} expects {spec.input_dim} features / {spec.num_classes} classes, "
            f"data has {train.dim} / {train.num_classes}",
        )])


def obtain_teacher(config: ExperimentConfig, train: Dataset) -> Teacher:
    """Load the configured teacher checkpoint, or pretrain one."""
    t = config.teacher
    if t.load is not None:
        params = load_params(t.load)
        _check_spec(params, train, t.load)
        logger.info("loaded teacher %s (%d params)", t.load, params.param_count())
        return Teacher(params)
    return train_teacher(config, train)


def train_teacher(config: ExperimentConfig, train: Dataset) -> Teacher:
    t = config.teacher
    spec = config.teacher_spec(train.dim, train.num_classes)
    logger.info("pretraining teacher %s for %d epoch(s)", spec.layer_dims, t.epochs)
    return pretrain_teacher(
        train, spec, config.to_budget(), t.epochs, config.sub_seed(SEED_TEACHER),
        learning_rate=t.learning_rate, batch_size=t.batch_size, adversarial=t.adversarial,
    )


def evaluation_row(config: ExperimentConfig, params: ModelParams, test: Dataset, round_index: int = 0) -> MetricsRow:
    attacks = config.to_eval_attacks()
    clean = evaluate_clean(params, test)
    if not attacks:
        return MetricsRow(round=round_index, clean_accuracy=clean)
    report = evaluate_robust(params, test, attacks, seed=config.sub_seed(SEED_EVAL),
                             batch_size=config.eval.batch_size)
    return MetricsRow(round=round_index, clean_accuracy=clean,
                      robust_accuracies=dict(report.per_attack), average_robust=report.average)


def pretrain(config: ExperimentConfig, checkpoint: Optional[PathLike] = None) -> Tuple[Path, Dict]:
    """Pretrain the teacher, save it and report its clean/robust test accuracy in teacher.json."""
    train, test = build_datasets(config)
    teacher = train_teacher(config, train)
    path = Path(checkpoint) if checkpoint is not None else Path(config.output.dir) / "teacher.ckpt"
    save_params(teacher.params, path)
    row = evaluation_row(config, teacher.params, test)
    report = {
        "checkpoint": str(path),
        "layer_dims": list(teacher.spec.layer_dims),
        "param_count": teacher.params.param_count(),
        "adversarial": config.teacher.adversarial,
        "epochs": config.teacher.epochs,
        "clean_accuracy": row.clean_accuracy,
        "robust_accuracies": row.robust_accuracies,
        "average_robust": row.average_robust,
    }
    write_json(report, path.with_name("teacher.json"))
    logger.info("teacher saved to %s (clean %.2f)", path, row.clean_accuracy)
    return path, report


def evaluate_checkpoint(config: ExperimentConfig, checkpoint: PathLike) -> MetricsRow:
    """Clean and robust accuracy of any saved model on the configured test set."""
    _, test = build_datasets(config)
    params = load_params(checkpoint)
    if params.spec.input_dim != test.dim:
        raise ConfigError([("data", f"{checkpoint} expects {params.spec.input_dim} features, data has {test.dim}")])
    return evaluation_row(config, params, test)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """One federated run: data, teacher, rounds, then metrics.csv/summary.json/global.ckpt.

    If training fails, the rows gathered so far are still written to
    metrics.csv before the error propagates.
    """
    out = Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(json.loads(config.model_dump_json()), out / "config.json")

    train, test = build_datasets(config)
    fed = config.to_fed(train.dim, train.num_classes)
    teacher = obtain_teacher(config, train) if fed.needs_teacher else None
    if teacher is not None and config.teacher.load is None:
        save_params(teacher.params, out / "teacher.ckpt")

    attack_names = [a.name for a in fed.eval_attacks]
    rows: List[MetricsRow] = []

    def on_record(record: RoundRecord) -> None:
        if record.evaluated:
            rows.append(MetricsRow.from_record(record))

    try:
        history = run_rounds(train, test, fed, config.to_partition(), teacher=teacher, on_record=on_record)
    except Exception:
        write_metrics_csv(rows, attack_names, out / "metrics.csv")
        logger.error("partial metrics (%d rows) flushed to %s", len(rows), out / "metrics.csv")
        raise

    write_metrics_csv(rows, attack_names, out / "metrics.csv")
    save_params(history.final_params, out / "global.ckpt")
    summary = build_summary(
        rows, attack_names,
        label=config.run_label,
        method=fed.method,
        seed=config.seed,
        num_clients=len(history.shards),
        param_count=fed.student_spec.param_count(),
        comm_rounds=fed.rounds,
        comm_params_per_round=communication_cost(fed.student_spec, len(history.shards)),
        last_k=config.eval.last_k,
        target_clean_accuracy=config.eval.target_clean_accuracy,
    )
    write_json(summary, out / "summary.json")
    return ExperimentResult(out_dir=out, history=history, rows=rows, summary=summary)


def sweep(config: ExperimentConfig, key: str, values: Sequence) -> pd.DataFrame:
    """Run ``config`` once per value of ``key``; each run gets its own sub-directory.

    Seed sweeps keep one label so ``compare`` averages them; any other key
    labels each run by its value.
    """
    if len(values) < 2:
        raise ValueError(f"a sweep needs at least 2 values, got {len(values)}")
    base = Path(config.output.dir)
    summaries = []
    for value in values:
        run_cfg = override(config, key, value)
        run_cfg = override(run_cfg, "output.dir", str(base / f"{key}={value}"))
        if key != "seed":
            run_cfg = override(run_cfg, "label", f"{config.run_label}[{key}={value}]")
        elif config.label is None:
            run_cfg = override(run_cfg, "label", config.run_label)
        logger.info("sweep %s = %s", key, value)
        result = run_experiment(run_cfg)
        summaries.append(result.out_dir / "summary.json")
    table = compare_runs(summaries)
    write_comparison(table, base / "comparison.csv")
    return table
