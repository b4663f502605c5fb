import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from elegant import oracle
from elegant.oracle import DiscreteChain, IDENTITIES, soft_value_backward, tilt_chain, verify_identities
from elegant.pretrained import PretrainedModel, standard_normal
from elegant.rewards import LinearReward, TiltedTarget


def tiny_chain():
    P = np.array([[[0.9, 0.1], [0.2, 0.8]]] * 2)
    return DiscreteChain(P, np.array([0.5, 0.5]), np.array([0.0, 1.0]), 1.0)


def test_soft_value_hand_computed():
    v = soft_value_backward(tiny_chain())
    # v_1(i) = log(sum_j P_ij e^{r_j})
    v1 = np.log([0.9 + 0.1 * np.e, 0.2 + 0.8 * np.e])
    assert np.allclose(v[1], v1)
    assert np.allclose(v[0], np.log(np.array([[0.9, 0.1], [0.2, 0.8]]) @ np.exp(v1)))


def test_small_alpha_uses_log_space():
    c = tiny_chain()
    c.alpha = 1e-3
    c.r = np.array([0.0, 5.0])
    t = tilt_chain(c)
    assert np.all(np.isfinite(t.v)) and np.isclose(t.marginals()[-1][1], 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_identities_exact_on_random_chains(seed):
    c = DiscreteChain.random(8, 4, seed, alpha=[0.3, 1.0, 2.5][seed % 3])
    rep = verify_identities(c, tilt_chain(c))
    assert set(rep) == set(IDENTITIES)
    for k, dev in rep.items():
        assert dev <= 1e-10, k


def test_corruption_is_detected():
    worst = oracle.run_discrete_suite(n_chains=2, small_chains=1, corrupt=1e-6)
    assert max(worst.values()) > 1e-7


def test_bridge_enumeration_skipped_when_large():
    c = DiscreteChain.random(20, 10, 0)
    assert verify_identities(c, tilt_chain(c))["bridge_enumeration"] is None


def test_chain_validation():
    with pytest.raises(ValueError):
        DiscreteChain(np.array([[0.5, 0.6], [0.5, 0.5]]), np.array([0.5, 0.5]), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        soft_value_backward(DiscreteChain(np.eye(2), np.array([0.5, 0.5]), np.zeros(2), 0.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_tilted_terminal_law_property(seed, alpha):
    c = DiscreteChain.random(5, 3, seed, alpha=alpha)
    t = tilt_chain(c)
    term = np.exp(c.r / alpha) * c.marginals()[-1]
    assert np.allclose(t.marginals()[-1], term / term.sum(), atol=1e-12)


def value_by_quadrature(model, b, alpha, t, x):
    """alpha log E[exp(b y0 / alpha) | y_s = x] by Bayes' rule on a 1-D grid."""
    s = model.horizon - t
    a, beta = np.exp(-s / 2), 1 - np.exp(-s)
    lik = lambda y: model.data.density(np.array([[y]]))[0] * norm.pdf(x, a * y, np.sqrt(beta))  # noqa: E731
    z, _ = quad(lik, -10, 10, points=[-2, 2], limit=200)
    num, _ = quad(lambda y: np.exp(b * y / alpha) * lik(y), -10, 10, points=[-2, 2], limit=200)
    return alpha * np.log(num / z)


@pytest.mark.parametrize("t,x,alpha", [(0.0, 0.3, 1.0), (2.5, -1.0, 0.5), (4.5, 1.7, 2.0), (4.9, -2.2, 1.0)])
def test_analytic_value_against_quadrature(model, t, x, alpha):
    got = oracle.analytic_value(model, LinearReward([1.0]), alpha, t, np.array([[x]]))[0]
    assert np.isclose(got, value_by_quadrature(model, 1.0, alpha, t, x), atol=1e-8)


def test_value_at_terminal_time_is_reward(model, linear):
    x = np.array([[0.1], [3.0]])
    assert np.allclose(oracle.analytic_value(model, linear, 1.0, model.horizon, x), linear(x))


def test_optimal_drift_is_value_gradient(model, linear):
    xs = np.linspace(-3, 3, 13)[:, None]
    for t in (0.0, 2.0, 4.9):
        h = 1e-5
        fd = (oracle.analytic_value(model, linear, 0.7, t, xs + h) - oracle.analytic_value(model, linear, 0.7, t, xs - h)) / (2 * h)
        assert np.allclose(oracle.analytic_optimal_drift(model, linear, 0.7, t, xs)[:, 0], fd / 0.7, atol=1e-7)


def test_conditional_mean_reward_gradient(model, linear):
    xs = np.linspace(-3, 3, 9)[:, None]
    m, g = oracle.conditional_mean_reward(model, linear, 3.0, xs)
    h = 1e-5
    fd = (oracle.conditional_mean_reward(model, linear, 3.0, xs + h)[0]
          - oracle.conditional_mean_reward(model, linear, 3.0, xs - h)[0]) / (2 * h)
    assert np.allclose(g[:, 0], fd, atol=1e-7)


def test_stationary_conditional_mean():
    m = PretrainedModel(standard_normal(1), 5.0)
    xs = np.linspace(-2, 2, 5)[:, None]
    mean, grad = oracle.conditional_mean_reward(m, LinearReward([1.0]), 1.0, xs)
    assert np.allclose(mean, np.exp(-2.0) * xs[:, 0]) and np.allclose(grad, np.exp(-2.0))


def test_hjb_residual_small(model, linear):
    res = oracle.hjb_residual(model, linear, 1.0, 2.5, np.linspace(-3, 3, 13), 2e-3)
    assert np.max(np.abs(res)) < 1e-7


def test_normalizer_is_time_independent_and_matches_target(model, linear):
    lc = oracle.continuous_normalizers(model, linear, 1.0, [0.0, 1.0, 3.0, 4.99])
    assert np.ptp(lc) < 1e-10
    assert np.isclose(lc[0], TiltedTarget(model.data, linear, 1.0).log_normalizer, atol=1e-10)


def test_optimal_initial_stationary_is_gaussian_shift():
    m = PretrainedModel(standard_normal(1), 5.0)
    oi = oracle.analytic_optimal_initial(m, LinearReward([1.0]), 1.0)
    # v_0 = e^{-T/2} x + const, so nu* = N(e^{-T/2}, 1)
    assert np.isclose(oi.gaussian.means[0, 0], np.exp(-2.5))
    g = oi.grid
    assert np.isclose(g.integrate(oi.density * g.points[:, 0]), np.exp(-2.5), atol=1e-10)
