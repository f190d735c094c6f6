"""Structured error types.

Every error raised on purpose by the package derives from ``AdvFedKDError``.
Input errors additionally derive from the builtin a caller would expect
(``ValueError``, ``KeyError``, ...), so plain ``except ValueError`` still works.
"""

from __future__ import annotations
from typing import List, Optional, Sequence, Tuple


class AdvFedKDError(Exception):
    """Base class for all advfedkd errors."""


class ShapeMismatchError(AdvFedKDError, ValueError):
    def __init__(self, op: str, dims: Sequence, detail: str = ""):
        self.op = op
        self.dims = tuple(tuple(d) if isinstance(d, (tuple, list)) else d for d in dims)
        msg = f"{op}: incompatible shapes {self.dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownOpError(AdvFedKDError, KeyError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"unknown op kind '{kind}'")


class NonScalarRootError(AdvFedKDError, ValueError):
    def __init__(self, shape: Tuple[int, ...]):
        self.shape = tuple(shape)
        super().__init__(f"backward() needs a scalar root, got shape {self.shape}")


class CheckpointError(AdvFedKDError, IOError):
    """Checkpoint could not be read or written."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint bytes fail the checksum, are truncated, or disagree with the header."""


class IdxFormatError(AdvFedKDError, ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxFormatError):
    def __init__(self, path: str, expected: int, found: int):
        self.path = path
        self.expected = expected
        self.found = found
        super().__init__(f"{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")


class IdxCountMismatchError(IdxFormatError):
    def __init__(self, n_images: int, n_labels: int):
        self.n_images = n_images
        self.n_labels = n_labels
        super().__init__(f"image count {n_images} != label count {n_labels}")


class IdxTruncatedError(IdxFormatError):
    def __init__(self, path: str, expected_bytes: int, found_bytes: int):
        self.path = path
        self.expected_bytes = expected_bytes
        self.found_bytes = found_bytes
        super().__init__(f"{path}: payload truncated, expected {expected_bytes} bytes, found {found_bytes}")


class EmptyDatasetError(AdvFedKDError, ValueError):
    """An operation that needs examples received none."""


class PartitionError(AdvFedKDError, RuntimeError):
    """Dirichlet partitioning could not satisfy the minimum shard size."""


class AggregationError(AdvFedKDError, ValueError):
    """Client models cannot be averaged (spec mismatch, bad sizes)."""


class DivergenceError(AdvFedKDError, FloatingPointError):
    def __init__(
        self,
        message: str,
        round: Optional[int] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        client: Optional[int] = None,
    ):
        self.round = round
        self.epoch = epoch
        self.batch = batch
        self.client = client
        where = ", ".join(
            f"{k}={v}" for k, v in (("round", round), ("client", client), ("epoch", epoch), ("batch", batch))
            if v is not None
        )
        super().__init__(f"{message} [{where}]" if where else message)


class TeacherCacheMissError(AdvFedKDError, KeyError):
    def __init__(self, missing: Sequence[int]):
        self.missing = list(missing)
        head = ", ".join(str(i) for i in self.missing[:5])
        super().__init__(f"teacher cache miss for {len(self.missing)} example(s): {head}")


class ConfigError(AdvFedKDError, ValueError):
    def __init__(self, problems: List[Tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{key}: {msg}" for key, msg in self.problems]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class SchemaMismatchError(AdvFedKDError, ValueError):
    """Run summaries being compared do not share one column schema."""
