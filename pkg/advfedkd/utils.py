"""Seeding, hashing and small numeric helpers."""
from __future__ import annotations

import hashlib
from typing import Iterable, Mapping

import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """Derive an independent 63-bit seed from a master seed and integer keys."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def arrays_digest(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over the raw float64 bytes and shapes of a sequence of arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def named_arrays_digest(named: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, a in named.items():
        h.update(name.encode())
        h.update(arrays_digest([a]).encode())
    return h.hexdigest()


def to_percent(fraction: float) -> float:
    """Convert a fraction in [0, 1] to percent."""
    return 100.0 * float(fraction)


def readonly(a: np.ndarray) -> np.ndarray:
    """Return a float64 copy of ``a`` that cannot be written to."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out
