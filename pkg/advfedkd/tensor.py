"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is the one MLP training, gradient-sign attacks and the distillation
losses need; nothing more. Every op caches its local vector-Jacobian product at
forward time, so ``backward`` never recomputes a forward value.

Shapes are explicit: the only broadcast is ``bias_add`` over the batch
dimension.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from .exceptions import NonScalarRootError, ShapeMismatchError, UnknownOpError

Array = np.ndarray
VJP = Callable[[Array], Tuple[Optional[Array], ...]]


@dataclass(eq=False)
class GraphNode:
    """Record of one op application: its kind, its inputs and its cached VJP."""
    kind: str
    inputs: Tuple["Tensor", ...]
    vjp: VJP


class Tensor:
    """Immutable float64 array, optionally tracked for gradients.

    Tensors hash by identity, so they can key the gradient map returned by
    :func:`backward`.
    """

    __slots__ = ("_values", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self._values = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[GraphNode] = None

    @classmethod
    def _from_op(cls, values: Array, node: Optional[GraphNode]) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(values, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t._values = arr
        t.node = node
        t.requires_grad = node is not None
        return t

    @property
    def values(self) -> Array:
        return self._values

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._values.shape

    @property
    def size(self) -> int:
        return int(self._values.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> Array:
        return self._values.copy()

    def item(self) -> float:
        if self._values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._from_op(self._values, None)

    def __repr__(self) -> str:
        tag = f", op={self.node.kind}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, Array, float, Sequence[float]]


def as_tensor(x: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    return Tensor._from_op(np.array(x, dtype=np.float64), None)


# ---------------------------------------------------------------------------
# Op kernels. Each returns (output values, vjp).
# ---------------------------------------------------------------------------

_OPS: Dict[str, Callable[..., Tuple[Array, VJP]]] = {}


def _register(kind: str):
    def deco(fn):
        _OPS[kind] = fn
        return fn
    return deco


def _same_shape(op: str, a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, (a.shape, b.shape), "operands must have equal shapes")


@_register("matmul")
def _matmul(a: Array, b: Array):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", (a.shape, b.shape), "need (m,k) @ (k,n)")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


@_register("bias_add")
def _bias_add(x: Array, b: Array):
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatchError("bias_add", (x.shape, b.shape), "need (B,n) + (n,)")
    return x + b, lambda g: (g, g.sum(axis=0))


@_register("relu")
def _relu(x: Array):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: (g * mask,)


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return temperature


@_register("softmax")
def _softmax_op(x: Array, temperature: float = 1.0):
    t = _check_temperature(temperature)
    s = _softmax(x / t, axis=-1)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)) / t,)
    return s, vjp


@_register("log_softmax")
def _log_softmax_op(x: Array, temperature: float = 1.0):
    t = _check_temperature(temperature)
    ls = _log_softmax(x / t, axis=-1)
    s = np.exp(ls)

    def vjp(g):
        return ((g - s * np.sum(g, axis=-1, keepdims=True)) / t,)
    return ls, vjp


@_register("add")
def _add(a: Array, b: Array):
    _same_shape("add", a, b)
    return a + b, lambda g: (g, g)


@_register("sub")
def _sub(a: Array, b: Array):
    _same_shape("sub", a, b)
    return a - b, lambda g: (g, -g)


@_register("mul")
def _mul(a: Array, b: Array):
    _same_shape("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


@_register("scale")
def _scale(x: Array, factor: float = 1.0):
    factor = float(factor)
    return x * factor, lambda g: (g * factor,)


@_register("sum")
def _sum(x: Array):
    shape = x.shape
    return np.sum(x), lambda g: (np.full(shape, float(g)),)


@_register("mean")
def _mean(x: Array):
    shape, n = x.shape, x.size
    return np.mean(x), lambda g: (np.full(shape, float(g) / n),)


@_register("sign")
def _sign(x: Array):
    # sign(0) == 0; the derivative is zero almost everywhere
    return np.sign(x), lambda g: (np.zeros_like(g),)


@_register("clamp")
def _clamp(x: Array, lo: float = -np.inf, hi: float = np.inf):
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: lo={lo} > hi={hi}")
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), lambda g: (g * inside,)


@_register("log")
def _log(x: Array):
    if np.any(x <= 0):
        raise ValueError("log of a non-positive value")
    return np.log(x), lambda g: (g / x,)


@_register("take_rows")
def _take_rows(x: Array, index: Sequence[int] = ()):
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim < 1 or idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeMismatchError("take_rows", (x.shape, idx.shape), "row index out of range")

    def vjp(g):
        out = np.zeros(x.shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)
    return x[idx], vjp


OP_KINDS: Tuple[str, ...] = tuple(_OPS)


def forward_op(kind: str, *inputs: TensorLike, **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs`` and record it when any input needs a gradient."""
    try:
        kernel = _OPS[kind]
    except KeyError:
        raise UnknownOpError(kind) from None
    tensors = tuple(as_tensor(i) for i in inputs)
    out, vjp = kernel(*(t.values for t in tensors), **attrs)
    if any(t.requires_grad for t in tensors):
        return Tensor._from_op(out, GraphNode(kind, tensors, vjp))
    return Tensor._from_op(out, None)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("matmul", a, b)


def bias_add(x: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("bias_add", x, b)


def relu(x: TensorLike) -> Tensor:
    return forward_op("relu", x)


def softmax(x: TensorLike, temperature: float = 1.0) -> Tensor:
    return forward_op("softmax", x, temperature=temperature)


def log_softmax(x: TensorLike, temperature: float = 1.0) -> Tensor:
    return forward_op("log_softmax", x, temperature=temperature)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("add", a, b)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("sub", a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("mul", a, b)


def scale(x: TensorLike, factor: float) -> Tensor:
    return forward_op("scale", x, factor=factor)


def reduce_sum(x: TensorLike) -> Tensor:
    return forward_op("sum", x)


def reduce_mean(x: TensorLike) -> Tensor:
    return forward_op("mean", x)


def sign(x: TensorLike) -> Tensor:
    return forward_op("sign", x)


def clamp(x: TensorLike, lo: float, hi: float) -> Tensor:
    return forward_op("clamp", x, lo=lo, hi=hi)


def log(x: TensorLike) -> Tensor:
    return forward_op("log", x)


def take_rows(x: TensorLike, index: Sequence[int]) -> Tensor:
    return forward_op("take_rows", x, index=index)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over the tracked subgraph: inputs before the ops using them."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(root: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, Tensor]:
    """Gradients of a scalar ``root`` with respect to tracked leaves.

    Without ``wrt`` the map covers every ``requires_grad`` leaf reachable from
    ``root``. With ``wrt`` it covers exactly those tensors; any that do not
    influence ``root`` get a zero gradient.
    """
    if root.size != 1:
        raise NonScalarRootError(root.shape)

    grads: Dict[int, Array] = {}
    leaves: List[Tensor] = []
    if root.requires_grad:
        grads[id(root)] = np.ones(root.shape, dtype=np.float64)
        for t in reversed(_topological_order(root)):
            g = grads.get(id(t))
            if t.node is None:
                leaves.append(t)
                continue
            if g is None:
                continue
            for inp, ig in zip(t.node.inputs, t.node.vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig

    targets = leaves if wrt is None else list(wrt)
    out: Dict[Tensor, Tensor] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = Tensor._from_op(np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape), None)
    return out


def grad(root: Tensor, x: Tensor) -> Array:
    """Gradient of ``root`` with respect to the single tensor ``x`` as an array."""
    return backward(root, wrt=[x])[x].values


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        if v.size != 1:
            raise NonScalarRootError(v.shape)
        return v.item()
    return float(v)


def finite_diff_gradient(f: Callable[[Tensor], TensorLike], x: TensorLike, h: float = 1e-5) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    base = np.array(as_tensor(x).values, dtype=np.float64)
    out = np.zeros_like(base)
    for k in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        out.flat[k] = (_scalar_value(f(Tensor(xp))) - _scalar_value(f(Tensor(xm)))) / (2.0 * h)
    return Tensor._from_op(out, None)


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------

def one_hot(labels: Sequence[int], num_classes: int) -> Array:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeMismatchError("one_hot", (labels.shape,), "labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if len(logits.shape) != 2:
        raise ShapeMismatchError("cross_entropy", (logits.shape,), "logits must be (B,C)")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatchError("cross_entropy", (logits.shape, labels.shape), "one label per row")
    picked = reduce_sum(mul(one_hot(labels, classes), log_softmax(logits)))
    return scale(picked, -1.0 / batch)
