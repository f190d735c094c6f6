"""Run outputs: metrics.csv, summary.json, the config echo and comparison tables.

- metrics.csv holds one row per evaluated round; its header is fixed by the
  evaluation attack list. Percentages are written at full round-trip
  precision so avg_robust is exactly the mean of the robust_* cells; losses
  carry 6 decimals.
- summary.json holds the means over the last ``last_k`` evaluated rounds plus
  communication accounting.
"""

from __future__ import annotations
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import SchemaMismatchError
from .federation import RoundRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOSS_COLUMNS = ("loss_vkd", "loss_akd", "loss_alg", "loss_total")
INTEGER_COLUMNS = ("comm_rounds", "comm_params_per_round", "comm_params_total", "param_count")
SUMMARY_KEYS = (
    "label", "method", "seed", "num_clients", "param_count", "comm_rounds",
    "comm_params_per_round", "comm_params_total", "clean_accuracy",
    "robust_accuracies", "average_robust", "eval_rounds_used",
    "target_clean_accuracy", "rounds_to_target",
)


@dataclass(frozen=True)
class MetricsRow:
    round: int
    clean_accuracy: float
    robust_accuracies: Dict[str, float] = field(default_factory=dict)
    average_robust: Optional[float] = None
    losses: Dict[str, float] = field(default_factory=dict)
    cumulative_comm_params: int = 0

    @classmethod
    def from_record(cls, record: RoundRecord) -> "MetricsRow":
        if not record.evaluated:
            raise ValueError(f"round {record.round} was not evaluated")
        loss = record.mean_loss
        return cls(
            round=record.round,
            clean_accuracy=record.clean_accuracy,
            robust_accuracies=dict(record.robust_accuracies),
            average_robust=record.average_robust,
            losses={f"loss_{k}": v for k, v in loss.as_dict().items()},
            cumulative_comm_params=record.cumulative_comm_params,
        )


def metrics_header(attack_names: Sequence[str]) -> List[str]:
    return (
        ["round", "clean_acc"]
        + [f"robust_{name}" for name in attack_names]
        + ["avg_robust", *LOSS_COLUMNS, "comm_params"]
    )


def _pct(v: Optional[float]) -> str:
    # repr is the shortest string that parses back to the same float
    return "" if v is None else repr(float(v))


def metrics_frame(rows: Sequence[MetricsRow], attack_names: Sequence[str]) -> pd.DataFrame:
    """Rows pre-formatted as strings so the file bytes never depend on pandas float repr."""
    records = []
    for r in rows:
        if set(r.robust_accuracies) != set(attack_names):
            raise SchemaMismatchError(
                f"round {r.round} has attacks {sorted(r.robust_accuracies)}, expected {sorted(attack_names)}"
            )
        rec = {"round": str(r.round), "clean_acc": _pct(r.clean_accuracy)}
        rec.update({f"robust_{n}": _pct(r.robust_accuracies[n]) for n in attack_names})
        rec["avg_robust"] = _pct(r.average_robust)
        rec.update({c: f"{r.losses.get(c, 0.0):.6f}" for c in LOSS_COLUMNS})
        rec["comm_params"] = str(r.cumulative_comm_params)
        records.append(rec)
    return pd.DataFrame(records, columns=metrics_header(attack_names), dtype=str)


def write_metrics_csv(rows: Sequence[MetricsRow], attack_names: Sequence[str], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(rows, attack_names).to_csv(path, index=False, lineterminator="\n")
    logger.info("wrote %d metrics rows to %s", len(rows), path)
    return path


def read_metrics_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def rounds_to_target(rows: Sequence[MetricsRow], target: Optional[float]) -> Optional[int]:
    """First evaluated round whose clean accuracy reaches ``target``."""
    if target is None:
        return None
    for r in rows:
        if r.clean_accuracy >= target:
            return r.round
    return None


def build_summary(
    rows: Sequence[MetricsRow],
    attack_names: Sequence[str],
    *,
    label: str,
    method: str,
    seed: int,
    num_clients: int,
    param_count: int,
    comm_rounds: int,
    comm_params_per_round: int,
    last_k: int = 5,
    target_clean_accuracy: Optional[float] = None,
) -> Dict:
    """Final figures: means over the last ``last_k`` evaluated rounds."""
    tail = list(rows)[-last_k:] if last_k > 0 else []

    def mean(values) -> Optional[float]:
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return {
        "label": label,
        "method": method,
        "seed": int(seed),
        "num_clients": int(num_clients),
        "param_count": int(param_count),
        "comm_rounds": int(comm_rounds),
        "comm_params_per_round": int(comm_params_per_round),
        "comm_params_total": int(comm_params_per_round) * int(comm_rounds),
        "clean_accuracy": mean(r.clean_accuracy for r in tail),
        "robust_accuracies": {n: mean(r.robust_accuracies.get(n) for r in tail) for n in attack_names},
        "average_robust": mean(r.average_robust for r in tail),
        "eval_rounds_used": [r.round for r in tail],
        "target_clean_accuracy": target_clean_accuracy,
        "rounds_to_target": rounds_to_target(rows, target_clean_accuracy),
    }


def write_json(payload: Dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_summary(path: PathLike) -> Dict:
    with open(path, "r") as f:
        data = json.load(f)
    missing = [k for k in SUMMARY_KEYS if k not in data]
    if missing:
        raise SchemaMismatchError(f"{path}: summary is missing {missing}")
    return data


def _summary_row(s: Dict) -> Dict:
    row = {k: s[k] for k in ("label", "method", "clean_accuracy")}
    row.update({f"robust_{n}": v for n, v in s["robust_accuracies"].items()})
    row["average_robust"] = s["average_robust"]
    for k in INTEGER_COLUMNS:
        row[k] = s[k]
    return row


def compare_runs(summary_paths: Sequence[PathLike], average: bool = True) -> pd.DataFrame:
    """One row per run (or per label, averaged over its runs) in the comparison schema.

    All summaries must report the same evaluation attacks.
    """
    if len(summary_paths) < 2:
        raise ValueError(f"compare needs at least 2 summaries, got {len(summary_paths)}")
    summaries = [read_summary(p) for p in summary_paths]
    attacks = list(summaries[0]["robust_accuracies"])
    for p, s in zip(summary_paths, summaries):
        if list(s["robust_accuracies"]) != attacks:
            raise SchemaMismatchError(
                f"{p}: attacks {list(s['robust_accuracies'])} differ from {attacks}"
            )
    frame = pd.DataFrame([_summary_row(s) for s in summaries])
    frame.insert(2, "runs", 1)
    if not average:
        return frame
    numeric = [c for c in frame.columns if c not in ("label", "method", "runs")]
    grouped = frame.groupby(["label", "method"], sort=False)
    out = grouped[numeric].mean()
    # runs sharing a label share a model and round count
    counts = [c for c in INTEGER_COLUMNS if c in out.columns]
    out[counts] = out[counts].round().astype("int64")
    out.insert(0, "runs", grouped.size())
    return out.reset_index()


def format_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda v: f"{v:.2f}")


def write_comparison(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.2f", lineterminator="\n")
    return path
