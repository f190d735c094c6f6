"""Distillation loss algebra and gradient tests.

Run with: pytest tests/test_distill.py
"""
import os
import sys

import numpy as np
import pytest
from scipy.special import log_softmax as np_log_softmax
from scipy.special import softmax as np_softmax

sys.path.append(os.getcwd())

from advfedkd.distill import (
    LossWeights,
    akd_loss,
    alg_loss,
    alignment_penalty,
    kl_distill,
    plain_kd_terms,
    total_loss,
    vkd_loss,
)
from advfedkd.mixture import MixedBatch, mix_batch
from advfedkd.models import ModelSpec, Teacher, forward, init_params
from advfedkd.tensor import Tensor, backward, finite_diff_gradient, softmax

SPEC = ModelSpec.mlp(3, [4], 2)


def np_forward(params, x):
    h = np.maximum(x @ params["W0"] + params["b0"], 0.0)
    return h @ params["W1"] + params["b1"]


def np_kl(p, q):
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def setup_case(seed=0, batch=4, lam=0.3):
    rng = np.random.default_rng(seed)
    teacher_params = init_params(SPEC, 100 + seed)
    student = init_params(SPEC, 200 + seed)
    x = rng.uniform(size=(batch, 3))
    perm = rng.permutation(batch)
    return teacher_params, student, x, MixedBatch(mix_batch(x, perm, lam), perm, lam)


# -- kl_distill ---------------------------------------------------------------

def test_kl_closed_form_log2():
    assert kl_distill([[1.0, 0.0]], [[0.0, 0.0]], 1.0).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_kl_self_is_zero_and_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(scale=3.0, size=(4, 5))
        t = rng.uniform(0.5, 5.0)
        assert abs(kl_distill(softmax(z, t), z, t).item()) <= 1e-9
        p = np_softmax(rng.normal(size=(4, 5)), axis=1)
        assert kl_distill(p, z, t).item() >= -1e-9


def test_kl_invariant_to_logit_shift():
    rng = np.random.default_rng(1)
    p = np_softmax(rng.normal(size=(3, 4)), axis=1)
    z = rng.normal(size=(3, 4))
    assert kl_distill(p, z + 2.5, 2.0).item() == pytest.approx(kl_distill(p, z, 2.0).item(), abs=1e-12)


def test_kl_rejects_non_probability_rows():
    with pytest.raises(ValueError):
        kl_distill([[0.6, 0.6]], [[0.0, 0.0]], 1.0)


# -- vkd / akd ----------------------------------------------------------------

def test_vkd_self_distillation_is_zero():
    params, _, x, m = setup_case()
    assert abs(vkd_loss(Teacher(params, 2.0), params, x, m, 2.0).item()) <= 1e-6


def test_vkd_lambda_one_is_twice_plain_kd():
    tp, student, x, _ = setup_case(lam=1.0)
    m = MixedBatch(x.copy(), np.arange(4), 1.0)
    teacher = Teacher(tp, 1.5)
    plain = kl_distill(teacher.predict(x), forward(student, x), 1.5).item()
    assert vkd_loss(teacher, student, x, m, 1.5).item() == pytest.approx(2 * plain, rel=1e-9)


def test_vkd_matches_hand_composition():
    tp, student, x, m = setup_case(seed=3)
    T = 2.0
    lam, perm = m.lam, m.permutation
    p = np_softmax(np_forward(tp, x) / T, axis=1)
    q = np_softmax(np_forward(student, x) / T, axis=1)
    pair = np_kl(lam * p + (1 - lam) * p[perm], lam * q + (1 - lam) * q[perm])
    xh = lam * x + (1 - lam) * x[perm]
    blend = np_kl(np_softmax(np_forward(tp, xh) / T, axis=1), np_softmax(np_forward(student, xh) / T, axis=1))
    assert vkd_loss(Teacher(tp, T), student, x, m, T).item() == pytest.approx(pair + blend, rel=1e-9)


def test_akd_matches_hand_composition():
    tp, student, x, _ = setup_case(seed=4)
    rng = np.random.default_rng(9)
    x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
    lam, perm, T = 0.7, np.array([2, 0, 3, 1]), 3.0
    adv_mix = MixedBatch(mix_batch(x_adv, perm, lam), perm, lam)
    p = np_softmax(np_forward(tp, x) / T, axis=1)
    q = np_softmax(np_forward(student, x_adv) / T, axis=1)
    pair = np_kl(lam * p + (1 - lam) * p[perm], lam * q + (1 - lam) * q[perm])
    # teacher sees the clean blend, student the blended AEs
    p_blend = np_softmax(np_forward(tp, lam * x + (1 - lam) * x[perm]) / T, axis=1)
    q_blend = np_softmax(np_forward(student, adv_mix.inputs) / T, axis=1)
    expected = pair + np_kl(p_blend, q_blend)
    assert akd_loss(Teacher(tp, T), student, x, x_adv, adv_mix, T).item() == pytest.approx(expected, rel=1e-9)


def test_akd_zero_budget_self_distillation_is_zero():
    params, _, x, m = setup_case()
    assert abs(akd_loss(Teacher(params), params, x, x, m, 1.0).item()) <= 1e-6


def test_akd_lambda_one_is_twice_plain_adv_kd():
    tp, student, x, _ = setup_case()
    x_adv = np.clip(x + 0.05, 0, 1)
    m = MixedBatch(x_adv.copy(), np.array([1, 0, 3, 2]), 1.0)
    teacher = Teacher(tp)
    plain = kl_distill(teacher.predict(x), forward(student, x_adv), 1.0).item()
    assert akd_loss(teacher, student, x, x_adv, m, 1.0).item() == pytest.approx(2 * plain, rel=1e-9)


# -- alignment ----------------------------------------------------------------

def test_alignment_hand_case():
    assert alignment_penalty([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]).item() == pytest.approx(1.0)


def test_alignment_is_quadratic():
    rng = np.random.default_rng(2)
    zg = rng.normal(size=(3, 4))
    d = rng.normal(size=(3, 4))
    base = alignment_penalty(zg + d, zg).item()
    assert alignment_penalty(zg + 2 * d, zg).item() == pytest.approx(4 * base, rel=1e-12)


def test_alg_zero_for_global_student_without_attack():
    params, _, x, _ = setup_case()
    assert alg_loss(params, params, x, x).item() == 0.0


def test_alg_gradient_flows_only_to_student():
    student, global_params = init_params(SPEC, 1), init_params(SPEC, 2)
    x = np.random.default_rng(0).uniform(size=(3, 3))
    s_leaves = student.leaves()
    g_leaves = global_params.leaves()
    loss = alg_loss(s_leaves, global_params, x, x)
    grads = backward(loss, wrt=list(s_leaves.values()) + list(g_leaves.values()))
    assert any(np.any(grads[t].values != 0) for t in s_leaves.values())
    assert all(np.all(grads[t].values == 0) for t in g_leaves.values())


# -- weights and total ----------------------------------------------------------

def test_rho_mapping():
    w = LossWeights.from_rho(5.0)
    assert w.coefficients() == pytest.approx((1 / 6, 5 / 6))
    assert w.rho == pytest.approx(5.0)
    literal = LossWeights.from_rho(5.0, weighting="literal")
    assert literal.coefficients() == pytest.approx((5 / 6, 1 / 6))


@pytest.mark.parametrize("rho", [0.0, 1.0, 5.0, 10.0])
def test_total_is_weighted_sum(rho):
    w = LossWeights.from_rho(rho)
    b = total_loss(w, 0.7, 1.3, 0.25)
    w_clean, w_robust = w.coefficients()
    assert b.total == pytest.approx(w_clean * 0.7 + w_robust * 1.3 + 0.25, abs=1e-12)
    assert (b.vkd, b.akd, b.alg) == (0.7, 1.3, 0.25)


def test_rho_one_halves():
    b = total_loss(LossWeights.from_rho(1.0), 2.0, 4.0, 1.0)
    assert b.total == pytest.approx(0.5 * 2.0 + 0.5 * 4.0 + 1.0)


def test_zero_robust_weight_is_vkd_plus_alg():
    b = total_loss(LossWeights.from_rho(0.0), 2.0, 9.0, 0.5)
    assert b.total == pytest.approx(2.5)


def test_alpha_one_rejected():
    with pytest.raises(ValueError):
        total_loss(LossWeights(alpha=1.0), 1.0, 1.0, 0.0)


def test_unmixed_zero_budget_total_is_twice_plain_kd_plus_alg():
    tp, student, x, _ = setup_case()
    teacher = Teacher(tp, 2.0)
    m = MixedBatch(x.copy(), np.arange(4), 1.0)
    vkd = vkd_loss(teacher, student, x, m, 2.0)
    akd = akd_loss(teacher, student, x, x, m, 2.0)
    alg = alg_loss(student, init_params(SPEC, 7), x, x)
    plain, _ = plain_kd_terms(teacher, student, x, x, 2.0)
    b = total_loss(LossWeights.from_rho(3.0, 2.0), vkd, akd, alg)
    assert b.total == pytest.approx(2 * plain.item() + alg.item(), rel=1e-9)


def test_total_gradient_matches_finite_differences():
    tp, student, x, m = setup_case(batch=2, lam=0.4)
    m = MixedBatch(mix_batch(x, np.array([1, 0]), 0.4), np.array([1, 0]), 0.4)
    x_adv = np.clip(x + 0.03, 0, 1)
    adv_mix = MixedBatch(mix_batch(x_adv, m.permutation, m.lam), m.permutation, m.lam)
    teacher = Teacher(tp, 2.0)
    global_params = init_params(SPEC, 55)
    weights = LossWeights.from_rho(2.0, 2.0)

    def objective(w):
        return total_loss(
            weights,
            vkd_loss(teacher, w, x, m, 2.0),
            akd_loss(teacher, w, x, x_adv, adv_mix, 2.0),
            alg_loss(w, global_params, x, x_adv),
        ).objective

    leaves = student.leaves()
    grads = backward(objective(leaves), wrt=leaves.values())
    for name, leaf in leaves.items():
        def f(t, name=name):
            w = dict(student.constants())
            w[name] = t
            return objective(w)
        fd = finite_diff_gradient(f, student[name]).values
        err = np.max(np.abs(grads[leaf].values - fd)) / max(1.0, np.max(np.abs(fd)))
        assert err <= 1e-4, f"{name}: relative error {err}"


def test_teacher_receives_no_gradient():
    tp, student, x, m = setup_case()
    teacher = Teacher(tp)
    teacher_leaves = tp.leaves()
    loss = vkd_loss(teacher, student.leaves(), x, m, 1.0)
    grads = backward(loss, wrt=teacher_leaves.values())
    assert all(np.all(g.values == 0) for g in grads.values())
    assert not teacher.predict(x).requires_grad


# -- gradient oracles on random micro-instances -------------------------------

ORACLE_CASES = 100


def clear_of_kinks(params, *inputs, margin=1e-3):
    """No hidden pre-activation within ``margin`` of the ReLU kink."""
    for x in inputs:
        h = np.asarray(x)
        for layer in range(params.spec.num_layers - 1):
            z = h @ params[f"W{layer}"] + params[f"b{layer}"]
            if np.min(np.abs(z)) < margin:
                return False
            h = np.maximum(z, 0.0)
    return True


def micro_instance(rng):
    """B <= 4, every width <= 8; resampled until the student is clear of kinks."""
    while True:
        d, h, c = (int(v) for v in rng.integers(2, 9, size=3))
        batch = int(rng.integers(1, 5))
        temperature = float(rng.uniform(0.5, 4.0))
        student = init_params(ModelSpec.mlp(d, [h], c), int(rng.integers(1 << 30)))
        teacher = Teacher(init_params(ModelSpec.mlp(d, [int(rng.integers(2, 9))], c), int(rng.integers(1 << 30))),
                          temperature)
        x = rng.uniform(size=(batch, d))
        x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0.0, 1.0)
        perm, lam = rng.permutation(batch), float(rng.uniform())
        mix = MixedBatch(mix_batch(x, perm, lam), perm, lam)
        adv_mix = MixedBatch(mix_batch(x_adv, perm, lam), perm, lam)
        if clear_of_kinks(student, x, x_adv, mix.inputs, adv_mix.inputs):
            global_params = init_params(student.spec, int(rng.integers(1 << 30)))
            return dict(student=student, teacher=teacher, x=x, x_adv=x_adv, mix=mix, adv_mix=adv_mix,
                        global_params=global_params, temperature=temperature)


def directional_error(objective, student, rng, h=1e-6):
    """Relative gap between grad . v and the central difference of the loss along v."""
    leaves = student.leaves()
    grads = backward(objective(leaves), wrt=leaves.values())
    direction = {n: rng.normal(size=a.shape) for n, a in student.items()}
    analytic = sum(float(np.sum(grads[leaves[n]].values * v)) for n, v in direction.items())

    def along(step):
        return objective({n: Tensor(student[n] + step * v) for n, v in direction.items()}).item()

    numeric = (along(h) - along(-h)) / (2.0 * h)
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def composed_objective(name, case):
    teacher, T = case["teacher"], case["temperature"]
    x, x_adv, m, adv_m = case["x"], case["x_adv"], case["mix"], case["adv_mix"]
    if name == "vkd":
        return lambda w: vkd_loss(teacher, w, x, m, T)
    if name == "akd":
        return lambda w: akd_loss(teacher, w, x, x_adv, adv_m, T)
    if name == "alg":
        return lambda w: alg_loss(w, case["global_params"], x, x_adv)
    weights = LossWeights.from_rho(3.0, T)
    return lambda w: total_loss(
        weights,
        vkd_loss(teacher, w, x, m, T),
        akd_loss(teacher, w, x, x_adv, adv_m, T),
        alg_loss(w, case["global_params"], x, x_adv),
    ).objective


@pytest.mark.parametrize("name", ["vkd", "akd", "alg", "total"])
def test_composed_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng({"vkd": 11, "akd": 12, "alg": 13, "total": 14}[name])
    for case_index in range(ORACLE_CASES):
        case = micro_instance(rng)
        err = directional_error(composed_objective(name, case), case["student"], rng)
        assert err <= 1e-4, f"{name} case {case_index}: relative error {err}"


def test_kl_distill_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    for case_index in range(ORACLE_CASES):
        batch, classes = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        p = np_softmax(rng.normal(size=(batch, classes)), axis=1)
        z0 = rng.normal(scale=2.0, size=(batch, classes))
        temperature = float(rng.uniform(0.5, 4.0))
        z = Tensor(z0, requires_grad=True)
        g = backward(kl_distill(p, z, temperature), wrt=[z])[z].values
        fd = finite_diff_gradient(lambda t: kl_distill(p, t, temperature), z0).values
        err = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))
        assert err <= 1e-4, f"case {case_index}: relative error {err}"
