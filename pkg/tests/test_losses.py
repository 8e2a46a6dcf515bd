import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedtail_lab.autograd import gradient, value_and_grad
from fedtail_lab.config import ConfigError, spec_from_dict
from fedtail_lab.losses import (
    Batch,
    adv_loss,
    cls_loss,
    entropy_loss,
    kl_divergence,
    max_square_loss,
    max_square_node,
    sagm_loss,
    sagm_objective,
    sam_loss,
    sam_objective,
    sam_perturbation,
    surrogate_gap,
    surrogate_gap_of,
)
from fedtail_lab.model import ModelSpec, zeros

import oracles
from conftest import quadratic

finite = st.floats(-1e3, 1e3, allow_nan=False)


def linear(a):
    a = np.asarray(a, dtype=float)
    return lambda p: (p * a).sum()


# -- classification and adversarial risk ------------------------------------

def test_zero_params_cls_loss_is_log_c():
    spec = ModelSpec(input_dim=2, num_classes=4, num_domains=2)
    b = Batch(np.random.default_rng(0).standard_normal((6, 2)), [0, 1, 2, 3, 0, 1], 0)
    val, _ = cls_loss(zeros(spec), b)
    assert val == pytest.approx(math.log(4), abs=1e-15)


def test_confident_correct_prediction_has_near_zero_loss():
    spec = ModelSpec(input_dim=2, num_classes=4, num_domains=2)
    p = zeros(spec)
    v = p.values.copy()
    v[p.segment("T.b0").offset + 2] = 30.0
    b = Batch(np.ones((3, 2)), [2, 2, 2], 0)
    assert cls_loss(p.with_values(v), b)[0] < 1e-9


def test_zero_params_adv_loss_is_log_k():
    spec = ModelSpec(input_dim=2, num_classes=2, num_domains=3)
    b = Batch(np.ones((4, 2)), [0, 1, 0, 1], 2)
    assert adv_loss(zeros(spec), b)[0] == pytest.approx(math.log(3), abs=1e-15)


def test_adv_loss_grl_zero_kills_feature_gradient(small_params, batch4):
    _, g = adv_loss(small_params, batch4, 0.0)
    assert not g.values[small_params.mask("F.").astype(bool)].any()


def test_single_domain_world_is_rejected():
    with pytest.raises(ConfigError):
        spec_from_dict({"data": {"num_domains": 1}})
    with pytest.raises(ValueError):
        ModelSpec(input_dim=2, num_classes=2, num_domains=1)


def test_losses_match_oracle(small_params, batch4):
    assert cls_loss(small_params, batch4)[0] == pytest.approx(
        oracles.cls_loss(small_params, batch4.x, batch4.y), rel=1e-13)
    assert adv_loss(small_params, batch4)[0] == pytest.approx(
        oracles.adv_loss(small_params, batch4.x, batch4.domain_id), rel=1e-13)


def test_losses_are_pure(small_params, batch4):
    for fn in (lambda: cls_loss(small_params, batch4), lambda: sam_loss(small_params, batch4, 0.05),
               lambda: sagm_loss(small_params, batch4, 0.05, 0.3)):
        a, b = fn(), fn()
        assert a[0] == b[0] and np.array_equal(a[1].values, b[1].values)


def test_label_out_of_range(small_params):
    with pytest.raises(ValueError):
        cls_loss(small_params, Batch(np.zeros((1, 3)), [3], 0))
    with pytest.raises(ValueError):
        adv_loss(small_params, Batch(np.zeros((1, 3)), [0], 2))


# -- SAM ----------------------------------------------------------------------

def test_sam_perturbation_examples():
    np.testing.assert_allclose(sam_perturbation(np.array([3.0, 4.0]), 0.05).values, [0.03, 0.04], rtol=1e-15)
    assert not sam_perturbation(np.zeros(3), 0.05).values.any()
    with pytest.raises(ValueError):
        sam_perturbation(np.ones(2), 0.0)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(1e-4, 10))
def test_sam_perturbation_has_norm_rho(g, rho):
    eps = sam_perturbation(g, rho).values
    if np.linalg.norm(g) < 1e-12:
        assert not eps.any()
    else:
        assert abs(np.linalg.norm(eps) - rho) <= 1e-12 * max(1.0, rho)
        assert np.dot(eps, g) > 0


def test_sam_quadratic_example():
    val, g = sam_objective(quadratic([1.0]), np.array([1.0]), 0.1)
    assert val == pytest.approx(0.605, abs=1e-15)
    assert g.values[0] == pytest.approx(1.1, abs=1e-15)


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=st.floats(0.0, 5.0)), arrays(np.float64, 4, elements=st.floats(-3, 3)),
       st.floats(1e-3, 1.0))
def test_sam_not_below_base_on_convex_quadratic(diag, theta, rho):
    build = quadratic(diag)
    base, _ = value_and_grad(build, theta)
    assert sam_objective(build, theta, rho)[0] >= base - 1e-12


def test_sam_small_rho_is_first_order(small_params, batch4):
    base, g = cls_loss(small_params, batch4)
    val, _ = sam_loss(small_params, batch4, 1e-6)
    assert abs(val - base - 1e-6 * g.norm()) < 1e-8


# -- surrogate gap and SAGM ---------------------------------------------------

def test_surrogate_gap_quadratic():
    assert surrogate_gap_of(quadratic([1.0]), np.array([1.0]), 0.1) == pytest.approx(0.105, abs=1e-15)


@pytest.mark.parametrize("a", [[2.0], [-3.0], [1.0, -2.0, 2.0]])
def test_surrogate_gap_linear(a):
    theta = np.linspace(-1, 1, len(a))
    assert surrogate_gap_of(linear(a), theta, 0.2) == pytest.approx(0.2 * np.linalg.norm(a), rel=1e-12)


def test_surrogate_gap_nonnegative_on_model(small_params, batch4):
    # cross-entropy is not convex in theta, but near a smooth point the gap is ~ rho*||g||
    assert surrogate_gap(small_params, batch4, 1e-3) > 0


def test_sagm_quadratic_example():
    val, g = sagm_objective(quadratic([1.0]), np.array([1.0]), 0.1, 1.0)
    assert val == pytest.approx(0.005, abs=1e-14)
    # g + g_p - (H g_p + H_p g) = 1 + 1.1 - (1.1 + 1)
    assert abs(g.values[0]) < 1e-6


def test_sagm_alpha_zero_is_sum(small_params, batch4):
    base, g = cls_loss(small_params, batch4)
    pert, gp = sam_loss(small_params, batch4, 0.05)
    val, gs = sagm_loss(small_params, batch4, 0.05, 0.0)
    assert val == base + pert
    np.testing.assert_array_equal(gs.values, g.values + gp.values)


def test_sagm_identical_gradients_linear():
    a = np.array([1.0, -2.0])
    theta = np.array([0.3, 0.7])
    base = float(a @ theta)
    val, _ = sagm_objective(linear(a), theta, 0.1, 0.5)
    pert = base + 0.1 * np.linalg.norm(a)
    assert val == pytest.approx(base + pert - 0.5 * a @ a, abs=1e-13)


def test_sagm_gradient_matches_finite_difference_with_fixed_eps():
    diag = np.array([1.0, 3.0, 0.5])
    build = quadratic(diag)
    theta = np.array([0.4, -0.2, 1.0])
    rho, alpha = 0.1, 0.7
    _, g = value_and_grad(build, theta)
    eps = sam_perturbation(g, rho).values

    def fixed(t):
        gt = diag * t
        gpt = diag * (t + eps)
        return 0.5 * (diag * t * t).sum() + 0.5 * (diag * (t + eps) ** 2).sum() - alpha * gt @ gpt

    want = oracles.central_diff(fixed, theta)
    np.testing.assert_allclose(sagm_objective(build, theta, rho, alpha)[1].values, want, atol=1e-6)


# -- max-square and entropy ---------------------------------------------------

@pytest.mark.parametrize("n", [1, 3, 17])
def test_max_square_uniform(n):
    for c in (2, 5, 7):
        assert max_square_loss(np.full((n, c), 1.0 / c)) == -1.0 / (2 * c)
    assert max_square_loss(np.full((n, 5), 0.2)) == pytest.approx(-0.1, abs=1e-16)


def test_max_square_one_hot():
    assert max_square_loss(np.eye(4)[[0, 3, 1]]) == -0.5


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
def test_max_square_derivative(n, c, seed):
    probs = np.random.default_rng(seed).dirichlet(np.ones(c), size=n)
    g = gradient(lambda p: max_square_node(p.reshape(probs.shape)), probs.ravel()).values
    np.testing.assert_allclose(g, (-probs / n).ravel(), rtol=0, atol=1e-10)


def test_entropy_examples():
    assert entropy_loss(np.full((3, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy_loss(np.eye(3)) == 0.0


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31))
def test_entropy_nonnegative(n, c, seed):
    probs = np.random.default_rng(seed).dirichlet(np.full(c, 0.3), size=n)
    assert entropy_loss(probs) >= 0.0


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(
        0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1), abs=1e-15)
    assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.510826, abs=1e-6)
    assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
def test_max_square_value_agrees_with_graph(n, c, seed):
    from fedtail_lab.autograd import evaluate

    probs = np.random.default_rng(seed).dirichlet(np.ones(c), size=n)
    graph = evaluate(lambda p: max_square_node(p.reshape(probs.shape)), probs.ravel())
    assert max_square_loss(probs) == pytest.approx(graph, rel=1e-14)
