"""Clean and robust accuracy of a classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
from sklearn.metrics import accuracy_score

from .attacks import AttackSpec, run_attack
from .data import Dataset
from .exceptions import EmptyDatasetError
from .models import ModelParams, cross_entropy_loss_fn, predict_logits
from .utils import derive_seed, to_percent


@dataclass(frozen=True)
class RobustReport:
    per_attack: Dict[str, float]
    average: float


def accuracy_percent(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(predict_logits(params, features), axis=1)
    return to_percent(accuracy_score(labels, pred))


def evaluate_clean(params: ModelParams, dataset: Dataset) -> float:
    """Top-1 accuracy on unperturbed inputs, in percent."""
    if len(dataset) == 0:
        raise EmptyDatasetError("clean evaluation needs a nonempty test set")
    return accuracy_percent(params, dataset.features, dataset.labels)


def attacked_features(
    params: ModelParams,
    dataset: Dataset,
    attack: AttackSpec,
    seed: int = 0,
    batch_size: int = 500,
) -> np.ndarray:
    """Every test point perturbed by ``attack`` against ``params``, batch by batch in order."""
    rng = np.random.default_rng(seed)
    loss_fn = cross_entropy_loss_fn(params)
    chunks = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.features[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        chunks.append(run_attack(attack, loss_fn, x, y, rng))
    return np.concatenate(chunks, axis=0)


def evaluate_robust(
    params: ModelParams,
    dataset: Dataset,
    attacks: Sequence[AttackSpec],
    seed: int = 0,
    batch_size: int = 500,
) -> RobustReport:
    """Accuracy under each attack plus their arithmetic mean, in percent."""
    if not attacks:
        raise ValueError("robust evaluation needs at least one attack")
    if len(dataset) == 0:
        raise EmptyDatasetError("robust evaluation needs a nonempty test set")
    per_attack: Dict[str, float] = {}
    for k, attack in enumerate(attacks):
        x_adv = attacked_features(params, dataset, attack, derive_seed(seed, k), batch_size)
        per_attack[attack.name] = accuracy_percent(params, x_adv, dataset.labels)
    return RobustReport(per_attack=per_attack, average=float(np.mean(list(per_attack.values()))))
