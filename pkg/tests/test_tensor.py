"""Autodiff core tests: op values, gradients vs finite differences, errors.

Run with: pytest tests/test_tensor.py
"""
import os
import sys

import numpy as np
import pytest

sys.path.append(os.getcwd())

from advfedkd.exceptions import NonScalarRootError, ShapeMismatchError, UnknownOpError
from advfedkd.tensor import (
    OP_KINDS,
    Tensor,
    backward,
    clamp,
    cross_entropy,
    finite_diff_gradient,
    forward_op,
    grad,
    log_softmax,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    sign,
    softmax,
)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_relu_values():
    assert np.array_equal(relu([-1.0, 0.0, 2.0]).values, [0.0, 0.0, 2.0])


def test_softmax_symmetric_pair():
    assert np.allclose(softmax([[0.0, 0.0]], 1.0).values, [[0.5, 0.5]])


def test_matmul_hand_computed():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([[1.0], [0.0], [-1.0]])
    assert np.array_equal(matmul(a, b).values, [[-2.0], [-2.0]])


def test_matmul_shape_mismatch_names_dims():
    with pytest.raises(ShapeMismatchError) as exc:
        matmul(np.ones((2, 3)), np.ones((2, 1)))
    assert "(2, 3)" in str(exc.value)


def test_unknown_op_kind():
    with pytest.raises(UnknownOpError):
        forward_op("conv2d", np.ones(2))


def test_required_op_kinds_registered():
    for kind in ("matmul", "bias_add", "relu", "softmax", "log_softmax", "add", "sub", "mul",
                 "scale", "sum", "mean", "sign", "clamp"):
        assert kind in OP_KINDS, f"missing op {kind}"


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    assert np.array_equal(grad(reduce_sum(x), x), np.ones((3, 4)))


def test_half_mean_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    root = forward_op("scale", reduce_mean(mul(x, x)), factor=0.5)
    assert np.allclose(grad(root, x), [3.0])


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarRootError):
        backward(relu(x))


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    grads = backward(reduce_sum(x), wrt=[x, y])
    assert np.array_equal(grads[y].values, np.zeros(3))


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    root = reduce_sum(mul(x, x))  # x used twice by one node
    assert np.allclose(grad(root, x), [4.0])


def test_finite_diff_square():
    g = finite_diff_gradient(lambda t: reduce_sum(mul(t, t)), [2.0], h=1e-5)
    assert abs(g.values[0] - 4.0) <= 1e-6


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(reduce_sum, [1.0], h=0.0)


UNARY_CASES = [
    ("relu", {}),
    ("softmax", {"temperature": 1.0}),
    ("softmax", {"temperature": 2.5}),
    ("log_softmax", {"temperature": 1.0}),
    ("log_softmax", {"temperature": 0.7}),
    ("scale", {"factor": -1.5}),
    ("sum", {}),
    ("mean", {}),
    ("clamp", {"lo": -0.5, "hi": 0.5}),
    ("log", {}),
]
CASES_PER_OP = 100


def micro_shape(rng):
    """Batch 1..4 by width 1..8."""
    return int(rng.integers(1, 5)), int(rng.integers(1, 9))


def away_from_kinks(x0, kind):
    if kind == "relu":
        return np.where(np.abs(x0) < 0.05, 0.2, x0)
    if kind == "clamp":
        x0 = np.where(np.abs(np.abs(x0) - 0.5) < 0.05, 0.2, x0)
        return np.where(np.abs(x0) < 0.05, 0.2, x0)
    if kind == "log":
        return np.abs(x0) + 0.2
    return x0


@pytest.mark.parametrize("kind,attrs", UNARY_CASES)
def test_unary_gradients_match_finite_differences(kind, attrs):
    rng = np.random.default_rng(sum(map(ord, kind)) + int(10 * sum(attrs.values())))
    for case in range(CASES_PER_OP):
        x0 = away_from_kinks(rng.normal(size=micro_shape(rng)), kind)
        w = rng.normal(size=x0.shape)

        def f(t):
            out = forward_op(kind, t, **attrs)
            return reduce_sum(mul(out, w)) if len(out.shape) else out

        x = Tensor(x0, requires_grad=True)
        err = rel_err(grad(f(x), x), finite_diff_gradient(f, x0).values)
        assert err <= 1e-4, f"{kind} case {case}: relative error {err}"


def binary_operands(kind, rng):
    b, d = micro_shape(rng)
    a0 = rng.normal(size=(b, d))
    if kind == "matmul":
        return a0, rng.normal(size=(d, int(rng.integers(1, 9))))
    if kind == "bias_add":
        return a0, rng.normal(size=(d,))
    return a0, rng.normal(size=(b, d))


@pytest.mark.parametrize("kind", ["matmul", "add", "sub", "mul", "bias_add"])
def test_binary_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(100 + len(kind))
    for case in range(CASES_PER_OP):
        a0, b0 = binary_operands(kind, rng)
        w = rng.normal(size=forward_op(kind, a0, b0).shape)

        def fa(t):
            return reduce_sum(mul(forward_op(kind, t, b0), w))

        def fb(t):
            return reduce_sum(mul(forward_op(kind, a0, t), w))

        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        grads = backward(reduce_sum(mul(forward_op(kind, a, b), w)), wrt=[a, b])
        assert rel_err(grads[a].values, finite_diff_gradient(fa, a0).values) <= 1e-4, f"{kind} case {case}"
        assert rel_err(grads[b].values, finite_diff_gradient(fb, b0).values) <= 1e-4, f"{kind} case {case}"


def test_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(7)
    for case in range(CASES_PER_OP):
        batch, classes = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        z0 = rng.normal(scale=2.0, size=(batch, classes))
        y = rng.integers(0, classes, size=batch)
        z = Tensor(z0, requires_grad=True)
        fd = finite_diff_gradient(lambda t: cross_entropy(t, y), z0)
        assert rel_err(grad(cross_entropy(z, y), z), fd.values) <= 1e-4, f"case {case}"


def test_softmax_is_probability_and_shift_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = rng.normal(scale=5.0, size=(4, 6))
        t = rng.uniform(0.5, 5.0)
        p = softmax(z, t).values
        assert np.all(p >= 0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(softmax(z + 3.7, t).values, p, atol=1e-12)


def test_log_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        log_softmax(np.zeros((1, 2)), 0.0)


def test_sign_and_clamp_ranges():
    x = np.random.default_rng(1).normal(size=100)
    x[:3] = 0.0
    assert set(np.unique(sign(x).values)) <= {-1.0, 0.0, 1.0}
    c = clamp(x, -0.3, 0.4).values
    assert c.min() >= -0.3 and c.max() <= 0.4


def test_sign_has_zero_gradient():
    x = Tensor([0.5, -2.0], requires_grad=True)
    assert np.array_equal(grad(reduce_sum(sign(x)), x), [0.0, 0.0])


def test_tensor_values_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 5.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    r1 = log_softmax(matmul(a, b), 2.0).values
    r2 = log_softmax(matmul(a, b), 2.0).values
    assert r1.tobytes() == r2.tobytes()


def test_clamp_gradient_passes_on_bounds_and_blocks_outside():
    x = Tensor([-0.5, -0.7, 0.0, 0.5, 0.9], requires_grad=True)
    g = grad(reduce_sum(clamp(x, -0.5, 0.5)), x)
    assert np.array_equal(g, [1.0, 0.0, 1.0, 1.0, 0.0])
