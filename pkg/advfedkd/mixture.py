"""Mixup pairing and blending for clean and adversarial batches.

One lambda ~ Beta(beta, beta) and one random permutation per batch; the same
pair (perm, lambda) blends the inputs and interpolates the matching model
outputs. Adversarial mixing blends examples that were already attacked.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .exceptions import ShapeMismatchError
from .tensor import Tensor, add, as_tensor, scale, take_rows


@dataclass(frozen=True)
class MixConfig:
    """``fixed_lambda`` replaces the Beta draw with a constant (comparison mode)."""
    beta_param: float = 0.2
    enabled: bool = True
    fixed_lambda: Optional[float] = None

    def __post_init__(self):
        if not self.beta_param > 0:
            raise ValueError(f"beta_param must be > 0, got {self.beta_param}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")


@dataclass(frozen=True)
class MixedBatch:
    inputs: np.ndarray
    permutation: np.ndarray
    lam: float


def sample_lambda(config: MixConfig, rng: np.random.Generator) -> float:
    """One mixing coefficient per batch; 1.0 (no mixing) when disabled."""
    if not config.enabled:
        return 1.0
    if config.fixed_lambda is not None:
        return float(config.fixed_lambda)
    return float(rng.beta(config.beta_param, config.beta_param))


def sample_permutation(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(batch_size)


def _check_permutation(perm: np.ndarray, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm.astype(np.int64)


def mix_batch(x: np.ndarray, perm: np.ndarray, lam: float) -> np.ndarray:
    """lam * x + (1 - lam) * x[perm]."""
    x = np.asarray(x, dtype=np.float64)
    perm = _check_permutation(perm, x.shape[0])
    return lam * x + (1.0 - lam) * x[perm]


def mix(x: np.ndarray, config: MixConfig, rng: np.random.Generator,
        perm: Optional[np.ndarray] = None, lam: Optional[float] = None) -> MixedBatch:
    """Draw (perm, lambda) unless given, and blend ``x`` with them."""
    x = np.asarray(x, dtype=np.float64)
    lam = sample_lambda(config, rng) if lam is None else float(lam)
    perm = sample_permutation(x.shape[0], rng) if perm is None else _check_permutation(perm, x.shape[0])
    return MixedBatch(inputs=mix_batch(x, perm, lam), permutation=perm, lam=lam)


Outputs = Union[Tensor, np.ndarray]


def mix_outputs(z_i: Outputs, z_permuted: Outputs, lam: float) -> Outputs:
    """lam * z_i + (1 - lam) * z_permuted.

    Arrays give arrays; if either side is a Tensor the result is a tracked Tensor.
    """
    if isinstance(z_i, Tensor) or isinstance(z_permuted, Tensor):
        a, b = as_tensor(z_i), as_tensor(z_permuted)
        if a.shape != b.shape:
            raise ShapeMismatchError("mix_outputs", (a.shape, b.shape))
        return add(scale(a, lam), scale(b, 1.0 - lam))
    a = np.asarray(z_i, dtype=np.float64)
    b = np.asarray(z_permuted, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("mix_outputs", (a.shape, b.shape))
    return lam * a + (1.0 - lam) * b


def mix_paired_outputs(z: Outputs, perm: np.ndarray, lam: float) -> Outputs:
    """Interpolate each output row with its partner row under ``perm``."""
    if isinstance(z, Tensor):
        perm = _check_permutation(perm, z.shape[0])
        return mix_outputs(z, take_rows(z, perm), lam)
    z = np.asarray(z, dtype=np.float64)
    perm = _check_permutation(perm, z.shape[0])
    return mix_outputs(z, z[perm], lam)
