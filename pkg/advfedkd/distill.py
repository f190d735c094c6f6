"""Distillation losses.

    kl_distill   KL(teacher || softmax(student / T)), batch mean
    vkd_loss     clean mixture distillation: paired-output term + blended-input term
    akd_loss     adversarial mixture distillation: teacher on clean data, student on AEs
    alg_loss     squared distance between local adversarial logits and global clean logits
    total_loss   w_clean * vkd + w_robust * akd + alg

Teacher probabilities are always detached; only student parameters (and
whatever else the caller tracks) receive gradients.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ShapeMismatchError
from .mixture import MixedBatch, mix_batch, mix_paired_outputs
from .models import ModelParams, ParamsLike, Teacher, forward
from .tensor import Tensor, TensorLike, add, as_tensor, clamp, log, log_softmax, mul, reduce_sum, scale, softmax, sub

WEIGHTINGS = ("robustness", "literal")

# floor applied before log() of interpolated student probabilities
_PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LossWeights:
    """Trade-off alpha in [0, 1] and distillation temperature.

    ``weighting="robustness"`` reads rho = alpha / (1 - alpha) as the ratio of
    robustness to accuracy: the adversarial term gets alpha, the clean term
    1 - alpha. ``"literal"`` attaches alpha to the clean term instead.
    """
    alpha: float = 0.5
    temperature: float = 1.0
    weighting: str = "robustness"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got '{self.weighting}'")

    @classmethod
    def from_rho(cls, rho: float, temperature: float = 1.0, weighting: str = "robustness") -> "LossWeights":
        if rho < 0:
            raise ValueError(f"rho must be >= 0, got {rho}")
        return cls(alpha=rho / (1.0 + rho), temperature=temperature, weighting=weighting)

    @property
    def rho(self) -> float:
        if self.alpha >= 1.0:
            raise ValueError("rho is undefined for alpha == 1")
        return self.alpha / (1.0 - self.alpha)

    def coefficients(self) -> Tuple[float, float]:
        """(w_clean, w_robust)."""
        if self.weighting == "literal":
            return self.alpha, 1.0 - self.alpha
        return 1.0 - self.alpha, self.alpha


@dataclass(frozen=True)
class LossBreakdown:
    vkd: float
    akd: float
    alg: float
    total: float
    objective: Optional[Tensor] = field(default=None, compare=False, repr=False)

    @classmethod
    def single(cls, loss: Tensor) -> "LossBreakdown":
        """Breakdown for a plain objective (CE baselines): only ``total`` is set."""
        return cls(0.0, 0.0, 0.0, loss.item(), objective=loss)

    @classmethod
    def mean(cls, items: Iterable["LossBreakdown"]) -> "LossBreakdown":
        items = list(items)
        if not items:
            return cls(0.0, 0.0, 0.0, 0.0)
        return cls(*(float(np.mean([getattr(b, k) for b in items])) for k in ("vkd", "akd", "alg", "total")))

    def as_dict(self) -> Dict[str, float]:
        return {"vkd": self.vkd, "akd": self.akd, "alg": self.alg, "total": self.total}


def _probabilities(p: TensorLike) -> np.ndarray:
    p = as_tensor(p).values
    if p.ndim != 2:
        raise ShapeMismatchError("kl_distill", (p.shape,), "teacher probabilities must be (B,C)")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("teacher rows must be probability vectors (nonnegative, summing to 1)")
    return p


def _neg_entropy(p: np.ndarray) -> float:
    """sum_c p log p over the batch, with 0 log 0 = 0."""
    safe = np.where(p > 0, p, 1.0)
    return float(np.sum(np.where(p > 0, p * np.log(safe), 0.0)))


def kl_distill(teacher_probs: TensorLike, student_logits: TensorLike, temperature: float) -> Tensor:
    """Batch mean of KL(p_t || softmax(student_logits / T))."""
    p = _probabilities(teacher_probs)
    z = as_tensor(student_logits)
    if z.shape != p.shape:
        raise ShapeMismatchError("kl_distill", (p.shape, z.shape))
    batch = p.shape[0]
    cross = reduce_sum(mul(p, log_softmax(z, temperature)))
    return add(scale(cross, -1.0 / batch), _neg_entropy(p) / batch)


def kl_probabilities(teacher_probs: TensorLike, student_probs: Tensor) -> Tensor:
    """Batch mean of KL(p_t || q_s) when the student side is already a distribution."""
    p = _probabilities(teacher_probs)
    q = as_tensor(student_probs)
    if q.shape != p.shape:
        raise ShapeMismatchError("kl_probabilities", (p.shape, q.shape))
    batch = p.shape[0]
    cross = reduce_sum(mul(p, log(clamp(q, _PROB_FLOOR, np.inf))))
    return add(scale(cross, -1.0 / batch), _neg_entropy(p) / batch)


def vkd_loss(
    teacher: Teacher,
    student: ParamsLike,
    batch: np.ndarray,
    mix: MixedBatch,
    temperature: float,
    ids: Optional[Sequence[int]] = None,
) -> Tensor:
    """Clean mixture distillation.

    Pair term: lambda-interpolated teacher probabilities vs lambda-interpolated
    student probabilities on the clean pair. Blend term: teacher vs student on
    the blended input.
    """
    x = np.asarray(batch, dtype=np.float64)
    perm, lam = mix.permutation, mix.lam
    p_pair = mix_paired_outputs(teacher.predict(x, ids).values, perm, lam)
    q_pair = mix_paired_outputs(softmax(forward(student, x), temperature), perm, lam)
    p_blend = teacher.predict(mix.inputs).values
    return add(
        kl_probabilities(p_pair, q_pair),
        kl_distill(p_blend, forward(student, mix.inputs), temperature),
    )


def akd_loss(
    teacher: Teacher,
    student: ParamsLike,
    batch: np.ndarray,
    adv_batch: np.ndarray,
    adv_mix: MixedBatch,
    temperature: float,
    ids: Optional[Sequence[int]] = None,
) -> Tensor:
    """Adversarial mixture distillation.

    The teacher only sees clean inputs (and their clean blend under the same
    perm/lambda); the student sees the AEs and the blended AEs.
    """
    x = np.asarray(batch, dtype=np.float64)
    x_adv = np.asarray(adv_batch, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ShapeMismatchError("akd_loss", (x.shape, x_adv.shape), "adversarial batch must match clean batch")
    perm, lam = adv_mix.permutation, adv_mix.lam
    p_pair = mix_paired_outputs(teacher.predict(x, ids).values, perm, lam)
    q_pair = mix_paired_outputs(softmax(forward(student, x_adv), temperature), perm, lam)
    p_blend = teacher.predict(mix_batch(x, perm, lam)).values
    return add(
        kl_probabilities(p_pair, q_pair),
        kl_distill(p_blend, forward(student, adv_mix.inputs), temperature),
    )


def alignment_penalty(student_adv_logits: TensorLike, global_logits: TensorLike) -> Tensor:
    """Batch mean of the squared l2 distance between two logit matrices.

    The global side is treated as a constant.
    """
    z_s = as_tensor(student_adv_logits)
    z_g = as_tensor(global_logits).detach()
    if z_s.shape != z_g.shape or len(z_s.shape) != 2:
        raise ShapeMismatchError("alignment_penalty", (z_s.shape, z_g.shape))
    diff = sub(z_s, z_g)
    return scale(reduce_sum(mul(diff, diff)), 1.0 / z_s.shape[0])


def alg_loss(student: ParamsLike, global_params: ModelParams, batch: np.ndarray, adv_batch: np.ndarray) -> Tensor:
    """Pull the student's logits on AEs toward the round-start global model's clean logits."""
    z_g = forward(global_params, np.asarray(batch, dtype=np.float64)).values
    return alignment_penalty(forward(student, np.asarray(adv_batch, dtype=np.float64)), z_g)


def plain_kd_terms(
    teacher: Teacher,
    student: ParamsLike,
    batch: np.ndarray,
    adv_batch: np.ndarray,
    temperature: float,
    ids: Optional[Sequence[int]] = None,
) -> Tuple[Tensor, Tensor]:
    """(KL(teacher clean, student clean), KL(teacher clean, student adv)) without mixing."""
    p = teacher.predict(batch, ids).values
    return (
        kl_distill(p, forward(student, batch), temperature),
        kl_distill(p, forward(student, adv_batch), temperature),
    )


def total_loss(
    weights: LossWeights,
    vkd: Union[Tensor, float],
    akd: Union[Tensor, float],
    alg: Union[Tensor, float],
) -> LossBreakdown:
    """Combine the three terms; the differentiable total is ``.objective``."""
    if not 0.0 <= weights.alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {weights.alpha}")
    w_clean, w_robust = weights.coefficients()
    vkd_t, akd_t, alg_t = as_tensor(vkd), as_tensor(akd), as_tensor(alg)
    objective = add(add(scale(vkd_t, w_clean), scale(akd_t, w_robust)), alg_t)
    return LossBreakdown(
        vkd=vkd_t.item(), akd=akd_t.item(), alg=alg_t.item(), total=objective.item(), objective=objective
    )
