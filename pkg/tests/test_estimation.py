import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdopt.channel import ChannelState, SystemConfig, aggregate_channel, draw_drop, draw_small_scale
from rdopt.estimation import (DegenerateInputError, EstimationStats, aggregated_variance, estimation_stats,
                              lmmse_coefficients, monte_carlo_sinr, power_control_full, simulate_pilot_estimate,
                              sinr_closed_form, sum_se)
from rdopt.experiments import planar_grid


def _toy_state(rng, M=4, K=2, N=8):
    cfg = SystemConfig.three_slope(M=M, K=K, N=N, ris_grid=planar_grid(N))
    return cfg, draw_drop(cfg, rng)


def test_lmmse_examples():
    c, g = lmmse_coefficients(np.array(1.0), 1, 1.0)
    assert c == pytest.approx(0.5) and g == pytest.approx(0.5)
    c, g = lmmse_coefficients(np.array(2.0), 3, 0.0)
    assert c == 0 and g == 0
    _, g = lmmse_coefficients(np.array(2.0), 1, 1e12)
    assert g == pytest.approx(2.0, rel=1e-9)


@given(st.floats(1e-6, 1e6), st.integers(1, 20), st.floats(0, 1e6))
def test_gamma_bounded_by_delta(delta, tau_p, p_p):
    c, g = lmmse_coefficients(np.array(delta), tau_p, p_p)
    snr = tau_p * p_p
    assert c >= 0
    assert g <= delta * (1 + 1e-12)
    assert g == pytest.approx(snr * delta ** 2 / (snr * delta + 1), rel=1e-12)


def test_aggregated_variance_definition():
    rng = np.random.default_rng(0)
    _, state = _toy_state(rng)
    theta = rng.uniform(0, 2 * np.pi, 8)
    from rdopt.channel import cascaded_second_moment
    delta = aggregated_variance(state, theta)
    for m in range(4):
        for k in range(2):
            ref = state.beta_mk[m, k] + cascaded_second_moment(state.beta_mr[m] * state.R,
                                                               state.beta_rk[k] * state.R, theta)
            assert delta[m, k] == pytest.approx(ref, rel=1e-12)


def test_estimation_stats_preconditions():
    rng = np.random.default_rng(0)
    _, state = _toy_state(rng)
    with pytest.raises(ValueError):
        estimation_stats(state, np.zeros(8), 1, 1.0)
    with pytest.raises(ValueError):
        estimation_stats(state, np.zeros(8), 2, -1.0)


def test_power_control_examples():
    assert power_control_full(np.array([[0.5]]))[0, 0] == pytest.approx(2.0)
    assert np.allclose(power_control_full(np.array([[0.5, 0.5]])), 1.0)
    with pytest.raises(DegenerateInputError):
        power_control_full(np.array([[0.0, 0.0], [1.0, 1.0]]))


@given(st.lists(st.floats(1e-6, 1e3), min_size=6, max_size=6))
def test_power_constraint_tight(vals):
    gamma = np.array(vals).reshape(3, 2)
    eta = power_control_full(gamma)
    assert np.all(eta >= 0)
    assert np.allclose((eta * gamma).sum(axis=1), 1.0, rtol=1e-12)


def test_sinr_examples():
    stats = EstimationStats(delta=np.array([[1.0]]), c_coef=np.array([[0.5]]), gamma=np.array([[0.5]]))
    assert sinr_closed_form(stats, np.array([[1.0]]), 1.0, 1.0)[0] == pytest.approx(1 / 6)
    assert np.all(sinr_closed_form(stats, np.array([[1.0]]), 0.0, 1.0) == 0)


def test_sinr_matches_explicit_sum():
    rng = np.random.default_rng(1)
    M, K = 3, 4
    gamma = rng.uniform(0.1, 1, (M, K))
    delta = gamma + rng.uniform(0, 1, (M, K))
    eta = rng.uniform(0.1, 1, (M, K))
    stats = EstimationStats(delta=delta, c_coef=np.zeros((M, K)), gamma=gamma)
    rho = 7.0
    out = sinr_closed_form(stats, eta, rho, 1.3)
    for k in range(K):
        num = abs(sum(math.sqrt(eta[m, k] * rho) * gamma[m, k] for m in range(M))) ** 2
        own = rho * sum(eta[m, k] * delta[m, k] * gamma[m, k] for m in range(M))
        other = rho * sum(eta[m, j] * delta[m, k] * gamma[m, j] for j in range(K) if j != k for m in range(M))
        assert out[k] == pytest.approx(num / (own + other + 1.3), rel=1e-12)


def test_sinr_non_decreasing_in_rho():
    rng = np.random.default_rng(2)
    _, state = _toy_state(rng)
    theta = rng.uniform(0, 2 * np.pi, 8)
    stats = estimation_stats(state, theta, 2, 1000.0)
    eta = power_control_full(stats.gamma)
    rhos = np.logspace(-2, 5, 30)
    vals = np.array([sinr_closed_form(stats, eta, r) for r in rhos])
    assert np.all(np.diff(vals, axis=0) >= -1e-12)


def test_sum_se_examples():
    assert sum_se(np.zeros(3), 188, 200) == 0
    assert sum_se(np.array([1.0]), 94, 100) == pytest.approx(0.94)
    a, b = np.array([0.3, 2.0]), np.array([5.0])
    assert sum_se(np.concatenate([a, b]), 9, 10) == pytest.approx(sum_se(a, 9, 10) + sum_se(b, 9, 10))


@given(st.permutations([0.1, 1.0, 3.0, 9.0]))
def test_sum_se_permutation_invariant(perm):
    assert sum_se(np.array(perm), 5, 7) == pytest.approx(sum_se(np.array([0.1, 1.0, 3.0, 9.0]), 5, 7))


def test_pilot_estimate_statistics():
    rng = np.random.default_rng(3)
    cfg, state = _toy_state(rng)
    theta = rng.uniform(0, 2 * np.pi, 8)
    stats = estimation_stats(state, theta, cfg.tau_p, cfg.p_p)
    real = draw_small_scale(state, rng, count=100_000)
    u = aggregate_channel(real, theta)
    u_hat = simulate_pilot_estimate(real, theta, cfg.tau_p, cfg.p_p, rng, c_coef=stats.c_coef)
    power = np.mean(np.abs(u_hat) ** 2, axis=0)
    assert np.allclose(power / stats.gamma, 1.0, atol=0.02)
    cross = np.mean((u - u_hat) * u_hat.conj(), axis=0)
    # 3-sigma bound on the sample mean of the (zero-mean) error/estimate product
    sd = np.sqrt(np.mean(np.abs((u - u_hat) * u_hat.conj()) ** 2, axis=0) / len(u))
    assert np.all(np.abs(cross) < 3 * sd * np.sqrt(2))


def test_pilot_estimate_high_power_limit():
    rng = np.random.default_rng(4)
    cfg, state = _toy_state(rng)
    theta = np.zeros(8)
    p_p = 1e14
    stats = estimation_stats(state, theta, 2, p_p)
    real = draw_small_scale(state, rng)
    u = aggregate_channel(real, theta)
    u_hat = simulate_pilot_estimate(real, theta, 2, p_p, rng, c_coef=stats.c_coef)
    assert np.allclose(u_hat, u, rtol=1e-4)
    with pytest.raises(ValueError):
        simulate_pilot_estimate(real, theta, 2, p_p, rng)


def test_monte_carlo_matches_closed_form():
    rng = np.random.default_rng(5)
    cfg, state = _toy_state(rng)
    theta = rng.uniform(0, 2 * np.pi, 8)
    stats = estimation_stats(state, theta, cfg.tau_p, cfg.p_p)
    eta = power_control_full(stats.gamma)
    rho = 100.0
    cf = sinr_closed_form(stats, eta, rho)
    mc, terms = monte_carlo_sinr(state, theta, eta, rho, 100_000, rng, tau_p=cfg.tau_p, p_p=cfg.p_p,
                                 return_terms=True)
    assert np.allclose(mc / cf, 1.0, atol=0.02)
    expected_D = np.sqrt(rho) * np.sum(np.sqrt(eta) * stats.gamma, axis=0)
    assert np.allclose(terms["D"].real / expected_D, 1.0, atol=0.01)


def test_monte_carlo_desired_term_million():
    rng = np.random.default_rng(6)
    cfg, state = _toy_state(rng, M=2, K=1, N=4)
    theta = rng.uniform(0, 2 * np.pi, 4)
    stats = estimation_stats(state, theta, 1, cfg.p_p)
    eta = power_control_full(stats.gamma)
    _, terms = monte_carlo_sinr(state, theta, eta, 10.0, 1_000_000, rng, tau_p=1, p_p=cfg.p_p,
                                chunk=200_000, return_terms=True)
    expected = math.sqrt(10.0) * np.sum(np.sqrt(eta) * stats.gamma, axis=0)
    assert terms["D"].real == pytest.approx(expected, rel=0.01)


def test_monte_carlo_single_trial_finite():
    rng = np.random.default_rng(7)
    cfg, state = _toy_state(rng)
    stats = estimation_stats(state, np.zeros(8), 2, cfg.p_p)
    out = monte_carlo_sinr(state, np.zeros(8), power_control_full(stats.gamma), 10.0, 1, rng, p_p=cfg.p_p)
    assert np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        monte_carlo_sinr(state, np.zeros(8), power_control_full(stats.gamma), 10.0, 0, rng)


def test_monte_carlo_deterministic():
    cfg, state = _toy_state(np.random.default_rng(8))
    stats = estimation_stats(state, np.zeros(8), 2, cfg.p_p)
    eta = power_control_full(stats.gamma)
    a = monte_carlo_sinr(state, np.zeros(8), eta, 10.0, 5000, np.random.default_rng(1), p_p=cfg.p_p)
    b = monte_carlo_sinr(state, np.zeros(8), eta, 10.0, 5000, np.random.default_rng(1), p_p=cfg.p_p)
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batched_stats_match_single(seed):
    rng = np.random.default_rng(seed)
    state = draw_drop(SystemConfig(), rng)
    thetas = rng.uniform(0, 2 * np.pi, (3, 16))
    batch = estimation_stats(state, thetas, 3, 1000.0)
    for i in range(3):
        single = estimation_stats(state, thetas[i], 3, 1000.0)
        assert np.allclose(batch.gamma[i], single.gamma, rtol=1e-12)
        assert np.allclose(batch.delta[i], single.delta, rtol=1e-12)


def test_state_with_zero_direct_link_still_valid():
    state = ChannelState(beta_mr=np.ones(1), beta_rk=np.ones(1), beta_mk=np.zeros((1, 1)), R=np.eye(4))
    stats = estimation_stats(state, np.zeros(4), 1, 1.0)
    assert stats.delta[0, 0] == pytest.approx(4.0)
