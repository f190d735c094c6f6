"""MLP classifiers, the frozen teacher, and parameter checkpoints.

A model is a stack of affine layers with ReLU between them:
    z = W_L relu(... relu(x W_0 + b_0) ...) + b_L
Parameters are immutable snapshots (``ModelParams``); a training step returns
a new snapshot instead of mutating the old one, so one snapshot can be shared
by every client of a round.
"""

from __future__ import annotations
import io
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax as _softmax

from .exceptions import (
    CheckpointCorruptError,
    CheckpointError,
    DivergenceError,
    ShapeMismatchError,
    TeacherCacheMissError,
)
from .tensor import Tensor, TensorLike, as_tensor, backward, bias_add, cross_entropy, matmul, relu
from .utils import named_arrays_digest, readonly

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths from input to classes, e.g. (784, 64, 10)."""
    layer_dims: Tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError(f"ModelSpec needs at least input and output dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation '{self.activation}'")

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int) -> "ModelSpec":
        return cls((int(input_dim), *[int(h) for h in hidden], int(num_classes)))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        for l in range(self.num_layers):
            shapes[f"W{l}"] = (self.layer_dims[l], self.layer_dims[l + 1])
            shapes[f"b{l}"] = (self.layer_dims[l + 1],)
        return shapes

    def param_count(self) -> int:
        d = self.layer_dims
        return sum(d[l] * d[l + 1] + d[l + 1] for l in range(self.num_layers))


def param_count(spec: ModelSpec) -> int:
    """Number of scalars in one model; the unit of communication accounting."""
    return spec.param_count()


class ModelParams:
    """Ordered, read-only weight/bias arrays for one network."""

    __slots__ = ("spec", "_arrays")

    def __init__(self, spec: ModelSpec, arrays: Mapping[str, np.ndarray]):
        shapes = spec.param_shapes()
        if set(arrays) != set(shapes):
            raise ShapeMismatchError(
                "ModelParams", (tuple(sorted(arrays)), tuple(shapes)), "parameter names do not match spec"
            )
        ordered: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in shapes.items():
            a = readonly(arrays[name])
            if a.shape != shape:
                raise ShapeMismatchError("ModelParams", (a.shape, shape), f"parameter {name}")
            ordered[name] = a
        self.spec = spec
        self._arrays = ordered

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def param_count(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def digest(self) -> str:
        return named_arrays_digest(self._arrays)

    def leaves(self) -> "OrderedDict[str, Tensor]":
        """Fresh gradient-tracked tensors over these values, one per parameter."""
        return OrderedDict((n, Tensor(a, requires_grad=True)) for n, a in self._arrays.items())

    def constants(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, Tensor._from_op(a, None)) for n, a in self._arrays.items())

    def sgd_step(self, grads: Mapping[str, Union[np.ndarray, Tensor]], learning_rate: float) -> "ModelParams":
        """Plain SGD: w - lr * g for every parameter."""
        new = OrderedDict()
        for name, a in self._arrays.items():
            g = grads[name]
            g = g.values if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            new[name] = a - learning_rate * g
        return ModelParams(self.spec, new)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self._arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality."""
        return (
            self.spec == other.spec
            and all(np.array_equal(a, other[n]) for n, a in self._arrays.items())
        )

    def __repr__(self) -> str:
        return f"ModelParams(dims={self.spec.layer_dims}, count={self.param_count()})"


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for l in range(spec.num_layers):
        fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{l}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{l}"] = np.zeros(fan_out)
    return ModelParams(spec, arrays)


ParamsLike = Union[ModelParams, Mapping[str, Tensor]]


def forward(params: ParamsLike, batch: TensorLike) -> Tensor:
    """Logits for ``batch`` (B x d). Differentiable in whatever inputs are tracked."""
    weights = params.constants() if isinstance(params, ModelParams) else params
    num_layers = len(weights) // 2
    h = as_tensor(batch)
    in_dim = weights["W0"].shape[0]
    if len(h.shape) != 2 or h.shape[1] != in_dim:
        raise ShapeMismatchError("forward", (h.shape, (None, in_dim)), "batch feature dim must equal spec input dim")
    for l in range(num_layers):
        h = bias_add(matmul(h, weights[f"W{l}"]), weights[f"b{l}"])
        if l < num_layers - 1:
            h = relu(h)
    return h


def predict_logits(params: ModelParams, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Untracked logits for a whole array, computed in fixed-order chunks."""
    out = [forward(params, features[i:i + batch_size]).values for i in range(0, len(features), batch_size)]
    if not out:
        return np.zeros((0, params.spec.num_classes))
    return np.concatenate(out, axis=0)


def cross_entropy_loss_fn(params: ParamsLike) -> Callable[[Tensor, np.ndarray], Tensor]:
    """Loss closure (x, y) -> CE of the model at ``params``; what attacks maximize."""
    def loss_fn(x: Tensor, y: np.ndarray) -> Tensor:
        return cross_entropy(forward(params, x), y)
    return loss_fn


def gradient_step(
    params: ModelParams,
    objective: Callable[["OrderedDict[str, Tensor]"], Tensor],
    learning_rate: float,
) -> Tuple[ModelParams, float]:
    """One SGD step on ``objective(leaves)``; returns the new params and the loss value."""
    leaves = params.leaves()
    loss = objective(leaves)
    value = loss.item()
    if not np.isfinite(value):
        return params, value
    grads = backward(loss, wrt=leaves.values())
    return params.sgd_step({n: grads[t] for n, t in leaves.items()}, learning_rate), value


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------

class Teacher:
    """Frozen pretrained model that only ever runs forward passes.

    Predictions are class probabilities, softmax(logits / temperature). An
    optional cache maps global example ids to those probabilities; with
    ``cache_only`` set, a lookup by id that misses is an error. Lookups
    without ids (e.g. on blended inputs) always run the network.
    """

    def __init__(
        self,
        params: ModelParams,
        temperature: float = 1.0,
        cache: Optional[Mapping[int, np.ndarray]] = None,
        cache_only: bool = False,
    ):
        if not temperature > 0:
            raise ValueError(f"teacher temperature must be > 0, got {temperature}")
        self._params = params
        self._temperature = float(temperature)
        self._cache: Dict[int, np.ndarray] = {int(k): readonly(v) for k, v in (cache or {}).items()}
        self._cache_only = bool(cache_only)

    @property
    def params(self) -> ModelParams:
        return self._params

    @property
    def spec(self) -> ModelSpec:
        return self._params.spec

    @property
    def temperature(self) -> float:
        return self._temperature

    @property
    def cache_size(self) -> int:
        return len(self._cache)

    @property
    def cache_only(self) -> bool:
        return self._cache_only

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        logits = predict_logits(self._params, np.asarray(features, dtype=np.float64))
        return _softmax(logits / self._temperature, axis=-1)

    def with_temperature(self, temperature: float) -> "Teacher":
        """Same network at another temperature; any cache is dropped."""
        if float(temperature) == self._temperature:
            return self
        return Teacher(self._params, temperature=temperature)

    def with_cache(self, features: np.ndarray, ids: Sequence[int], cache_only: bool = False) -> "Teacher":
        """Copy of this teacher whose predictions for ``ids`` are precomputed."""
        ids = np.asarray(ids, dtype=np.int64)
        probs = self.probabilities(features)
        cache = dict(self._cache)
        cache.update({int(i): p for i, p in zip(ids, probs)})
        logger.debug("teacher cache built for %d examples", len(ids))
        return Teacher(self._params, self._temperature, cache=cache, cache_only=cache_only)

    def predict(self, batch: TensorLike, ids: Optional[Sequence[int]] = None) -> Tensor:
        x = as_tensor(batch).values
        if ids is None:
            return Tensor._from_op(self.probabilities(x), None)
        ids = [int(i) for i in ids]
        missing = [i for i in ids if i not in self._cache]
        if missing and self._cache_only:
            raise TeacherCacheMissError(missing)
        if not missing:
            return Tensor._from_op(np.stack([self._cache[i] for i in ids]), None)
        out = self.probabilities(x)
        for row, i in enumerate(ids):
            if i in self._cache:
                out[row] = self._cache[i]
        return Tensor._from_op(out, None)

    def digest(self) -> str:
        return self._params.digest()


def teacher_predict(teacher: Teacher, batch: TensorLike, ids: Optional[Sequence[int]] = None) -> Tensor:
    """Teacher class probabilities for ``batch``; detached from any graph."""
    return teacher.predict(batch, ids)


def pretrain_teacher(
    dataset,
    spec: ModelSpec,
    budget,
    epochs: int,
    seed: int,
    learning_rate: float = 0.05,
    batch_size: int = 64,
    adversarial: bool = True,
) -> Teacher:
    """Centralized (PGD-)adversarial training of the teacher network.

    With ``adversarial`` every batch is replaced by its PGD examples under
    ``budget`` before the SGD step (min-max training); otherwise plain CE.
    """
    from .attacks import pgd_attack
    from .utils import derive_seed

    params = init_params(spec, seed)
    rng = np.random.default_rng(derive_seed(seed, 1))
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            x, y = dataset.features[idx], dataset.labels[idx]
            if adversarial:
                x = pgd_attack(cross_entropy_loss_fn(params), x, y, budget, rng)
            params, loss = gradient_step(params, lambda w: cross_entropy(forward(w, x), y), learning_rate)
            if not np.isfinite(loss) or not params.is_finite():
                raise DivergenceError("teacher pretraining diverged", epoch=epoch, batch=b)
            total += loss
            batches += 1
        logger.info("teacher epoch %d/%d  %s loss %.4f", epoch + 1, epochs,
                    "adv" if adversarial else "clean", total / max(batches, 1))
    return Teacher(params)


# ---------------------------------------------------------------------------
# Checkpoints
#   magic | u32 version | u32 n_dims | u32 dims[n] | u64 param_count | u32 n_tensors
#   per tensor: u16 name_len | name | u8 ndim | u32 shape[ndim] | f64 values (LE)
#   u32 CRC32 of everything above
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AFKDCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CheckpointHeader:
    version: int
    layer_dims: Tuple[int, ...]
    param_count: int
    num_tensors: int


def encode_params(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    dims = params.spec.layer_dims
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(struct.pack("<QI", params.param_count(), len(params)))
    for name, a in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(f"{self.source}: unexpected end of checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _verified_body(data: bytes, source: str) -> bytes:
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{source}: not an advfedkd checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError(f"{source}: checksum mismatch (truncated or corrupted)")
    return body


def _read_header(r: _Reader) -> CheckpointHeader:
    r.take(len(CHECKPOINT_MAGIC))
    version, n_dims = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointCorruptError(f"{r.source}: unsupported checkpoint version {version}")
    dims = r.unpack(f"<{n_dims}I")
    count, n_tensors = r.unpack("<QI")
    return CheckpointHeader(version, tuple(dims), int(count), int(n_tensors))


def decode_params(data: bytes, source: str = "<bytes>") -> ModelParams:
    r = _Reader(_verified_body(data, source), source)
    header = _read_header(r)
    try:
        spec = ModelSpec(header.layer_dims)
    except ValueError as e:
        raise CheckpointCorruptError(f"{source}: bad spec in header: {e}") from e
    if spec.param_count() != header.param_count:
        raise CheckpointCorruptError(
            f"{source}: header param_count {header.param_count} != spec count {spec.param_count()}"
        )
    arrays = OrderedDict()
    for _ in range(header.num_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointCorruptError(f"{source}: {len(r.data) - r.pos} trailing bytes")
    try:
        return ModelParams(spec, arrays)
    except ShapeMismatchError as e:
        raise CheckpointCorruptError(f"{source}: {e}") from e


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_params(params))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def _read_bytes(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_params(path: Union[str, Path]) -> ModelParams:
    return decode_params(_read_bytes(path), str(path))


def read_checkpoint_header(path: Union[str, Path]) -> CheckpointHeader:
    data = _read_bytes(path)
    return _read_header(_Reader(_verified_body(data, str(path)), str(path)))
