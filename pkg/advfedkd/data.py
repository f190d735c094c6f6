"""Datasets: synthetic Gaussian mixtures, MNIST-style IDX files, splitting.

All features are float64 in [0, 1]; attack budgets are expressed in these units.
"""

from __future__ import annotations
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from .exceptions import (
    EmptyDatasetError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .utils import readonly

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) in [0, 1]
    labels: np.ndarray    # (n,) ints in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        x = readonly(self.features)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        y.setflags(write=False)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def majority_rate(self) -> float:
        """Accuracy of always predicting the most frequent class, in percent."""
        if len(self) == 0:
            raise EmptyDatasetError("majority rate of an empty dataset")
        return 100.0 * self.class_histogram().max() / len(self)


def class_means(num_classes: int, dim: int) -> np.ndarray:
    classes = np.arange(num_classes)
    if num_classes <= dim:
        return 0.2 + 0.6 * np.eye(num_classes, dim)
    if dim < 63 and num_classes <= 2 ** dim:
        bits = (classes[:, None] >> np.arange(dim)[None, :]) & 1
        return 0.2 + 0.6 * bits.astype(np.float64)
    return np.repeat((0.2 + 0.6 * classes / (num_classes - 1))[:, None], dim, axis=1)


def synth_gaussian_mixture(num_classes: int, dim: int, n_per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, one per class, clamped to [0, 1].

    Class means live in [0.2, 0.8]^d. With C <= d they are simplex vertices
    (0.8 on coordinate c, 0.2 elsewhere); with C <= 2^d they are hypercube
    corners given by the bits of c; otherwise they are evenly spaced along
    the diagonal.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, dim))
    features = np.clip(means[labels] + spread * noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def _open(path: Union[str, Path]):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Union[str, Path], magic: int, header_words: int) -> Tuple[Tuple[int, ...], bytes]:
    with _open(path) as f:
        raw = f.read()
    header_len = 4 * (1 + header_words)
    if len(raw) < 4:
        raise IdxTruncatedError(str(path), header_len, len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(str(path), magic, found)
    if len(raw) < header_len:
        raise IdxTruncatedError(str(path), header_len, len(raw))
    dims = struct.unpack(f">{header_words}I", raw[4:header_len])
    return dims, raw[header_len:]


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    limit: Optional[int] = None,
    num_classes: Optional[int] = None,
) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255.

    Only the first ``limit`` examples are kept. ``num_classes`` defaults to
    max(label) + 1.
    """
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise IdxCountMismatchError(count, n_labels)
    if len(pixels) < count * rows * cols:
        raise IdxTruncatedError(str(images_path), count * rows * cols, len(pixels))
    if len(label_bytes) < n_labels:
        raise IdxTruncatedError(str(labels_path), n_labels, len(label_bytes))
    n = count if limit is None else min(int(limit), count)
    images = np.frombuffer(pixels, dtype=np.uint8, count=n * rows * cols).reshape(n, rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    logger.info("loaded %d IDX examples (%dx%d) from %s", n, rows, cols, images_path)
    return Dataset(images.astype(np.float64) / 255.0, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError(f"images {images.shape} / labels {labels.shape} do not line up")
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Disjoint shuffled train/test split, deterministic in ``seed``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train_idx, test_idx = train_test_split(
        np.arange(len(dataset)), test_size=test_fraction, random_state=int(seed) % 2**32, shuffle=True
    )
    return dataset.subset(train_idx), dataset.subset(test_idx)
