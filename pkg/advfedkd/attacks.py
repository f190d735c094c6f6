"""l-inf gradient-sign attacks: FGSM, BIM and PGD.

Inputs live in [0, 1]. Every attack works on plain float64 arrays and a loss
closure ``loss_fn(x: Tensor, y) -> scalar Tensor``; the closure is
differentiated with respect to ``x`` only, so the attacked model is never
updated.

Iterate rule:
    x_{t+1} = clip(clip(x_t + step * sign(grad_x loss(x_t)), x - eps, x + eps), 0, 1)
"""

from __future__ import annotations
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .exceptions import NonScalarRootError, ShapeMismatchError
from .tensor import Tensor, backward

LossFn = Callable[[Tensor, np.ndarray], Tensor]

ATTACK_KINDS = ("fgsm", "bim", "pgd")


@dataclass(frozen=True)
class AdvBudget:
    """Attack budget: l-inf bound, per-step size, step count and random start."""
    epsilon: float
    step_size: float
    iterations: int
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and not self.step_size > 0:
            raise ValueError(f"step_size must be > 0 when iterations > 0, got {self.step_size}")


# Desk defaults for [0,1]-scaled inputs. Training K is a configurable choice.
MNIST_BUDGET = AdvBudget(epsilon=0.3, step_size=0.01, iterations=10, random_start=True)
CIFAR_BUDGET = AdvBudget(epsilon=8 / 255, step_size=2 / 255, iterations=10, random_start=True)


@dataclass(frozen=True)
class AttackSpec:
    """A named evaluation attack, e.g. ("pgd40", "pgd", budget)."""
    name: str
    kind: str
    budget: AdvBudget

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind '{self.kind}', expected one of {ATTACK_KINDS}")


def _check_inputs(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2:
        raise ShapeMismatchError("attack", (x.shape,), "inputs must be (B,d)")
    if y.shape != (x.shape[0],):
        raise ShapeMismatchError("attack", (x.shape, y.shape), "one label per input row")


def input_gradient(loss_fn: LossFn, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the scalar ``loss_fn(x, y)`` with respect to ``x``."""
    leaf = Tensor(x, requires_grad=True)
    loss = loss_fn(leaf, y)
    if loss.size != 1:
        raise NonScalarRootError(loss.shape)
    return backward(loss, wrt=[leaf])[leaf].values


def project_linf(x_cand, x_center, epsilon: float) -> np.ndarray:
    """Clamp ``x_cand`` into the eps-ball around ``x_center``, then into [0, 1]."""
    x_cand = np.asarray(x_cand.values if isinstance(x_cand, Tensor) else x_cand, dtype=np.float64)
    x_center = np.asarray(x_center.values if isinstance(x_center, Tensor) else x_center, dtype=np.float64)
    if x_cand.shape != x_center.shape:
        raise ShapeMismatchError("project_linf", (x_cand.shape, x_center.shape))
    return np.clip(np.clip(x_cand, x_center - epsilon, x_center + epsilon), 0.0, 1.0)


def pgd_attack(
    loss_fn: LossFn,
    x: np.ndarray,
    y: np.ndarray,
    budget: AdvBudget,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Projected gradient ascent on ``loss_fn`` inside the l-inf ball of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_inputs(x, y)
    eps = float(budget.epsilon)
    if budget.random_start and eps > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_t = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    else:
        x_t = x.copy()
    for _ in range(budget.iterations):
        g = input_gradient(loss_fn, x_t, y)
        x_t = project_linf(x_t + budget.step_size * np.sign(g), x, eps)
    return x_t


def fgsm_attack(loss_fn: LossFn, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Single signed step of size eps; PGD with K=1, step=eps, no random start."""
    if epsilon == 0:
        x = np.asarray(x, dtype=np.float64)
        _check_inputs(x, np.asarray(y, dtype=np.int64))
        return x.copy()
    return pgd_attack(loss_fn, x, y, AdvBudget(epsilon, epsilon, 1, random_start=False))


def bim_attack(loss_fn: LossFn, x: np.ndarray, y: np.ndarray, budget: AdvBudget) -> np.ndarray:
    """Iterative FGSM: PGD without the random start."""
    return pgd_attack(loss_fn, x, y, replace(budget, random_start=False))


def run_attack(
    attack: AttackSpec,
    loss_fn: LossFn,
    x: np.ndarray,
    y: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Dispatch on ``attack.kind``."""
    if attack.kind == "fgsm":
        return fgsm_attack(loss_fn, x, y, attack.budget.epsilon)
    if attack.kind == "bim":
        return bim_attack(loss_fn, x, y, attack.budget)
    return pgd_attack(loss_fn, x, y, attack.budget, rng)
