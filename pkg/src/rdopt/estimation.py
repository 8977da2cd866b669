"""LMMSE estimation statistics, power control and the UatF sum-SE bound.

The closed form is checked against :func:`monte_carlo_sinr`, which rebuilds
the desired-signal, beamforming-uncertainty and interference terms from raw
channel and pilot-noise draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelState, aggregate_channel, cascade_gain, complex_gaussian, draw_small_scale


class DegenerateInputError(ValueError):
    pass


@dataclass
class EstimationStats:
    delta: np.ndarray  # (..., M, K) aggregated-channel variance
    c_coef: np.ndarray
    gamma: np.ndarray  # estimate variance E|u_hat|^2


def aggregated_variance(state: ChannelState, theta) -> np.ndarray:
    """delta_mk; theta may carry leading batch axes."""
    q = np.asarray(cascade_gain(state.R, theta))
    cascade = np.multiply.outer(q, np.outer(state.beta_mr, state.beta_rk))
    return state.beta_mk + cascade


def lmmse_coefficients(delta, tau_p: int, p_p: float):
    snr = tau_p * p_p
    c = np.sqrt(snr) * delta / (snr * delta + 1.0)
    gamma = np.sqrt(snr) * delta * c
    return c, gamma


def estimation_stats(state: ChannelState, theta, tau_p: int, p_p: float) -> EstimationStats:
    if tau_p < state.K:
        raise ValueError(f"tau_p={tau_p} < K={state.K}")
    if p_p < 0:
        raise ValueError("p_p must be non-negative")
    delta = aggregated_variance(state, theta)
    c, gamma = lmmse_coefficients(delta, tau_p, p_p)
    return EstimationStats(delta=delta, c_coef=c, gamma=gamma)


def power_control_full(gamma: np.ndarray) -> np.ndarray:
    """Each AP spends its full budget, split evenly: eta_mk = 1 / sum_k gamma_mk."""
    gamma = np.asarray(gamma, dtype=float)
    total = gamma.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateInputError("an AP has zero total estimate variance")
    return np.broadcast_to(1.0 / total, gamma.shape).copy()


def sinr_closed_form(stats: EstimationStats, eta, rho_d: float, sigma_n2: float = 1.0) -> np.ndarray:
    """Closed-form effective SINR per user (last axis K, optional leading axes)."""
    gamma, delta = stats.gamma, stats.delta
    eta = np.asarray(eta, dtype=float)
    num = rho_d * np.sum(np.sqrt(eta) * gamma, axis=-2) ** 2
    # sum_m delta_mk * sum_k' eta_mk' gamma_mk' covers both the k'=k and k'!=k terms
    per_ap = np.sum(eta * gamma, axis=-1, keepdims=True)
    den = rho_d * np.sum(delta * per_ap, axis=-2) + sigma_n2
    return num / den


def sum_se(delta_k, tau_d: int, tau_c: int) -> float:
    delta_k = np.asarray(delta_k, dtype=float)
    return (tau_d / tau_c) * np.sum(np.log2(1.0 + delta_k), axis=-1)


def simulate_pilot_estimate(realization, theta, tau_p: int, p_p: float, rng, c_coef=None, sigma_n2=1.0):
    """LMMSE estimate from one pilot transmission.

    The pilot-projected AP noise is independent across users because the
    pilots are orthogonal. ``c_coef`` is required: a realization does not
    carry the large-scale coefficients it would be computed from.
    """
    if c_coef is None:
        raise ValueError("c_coef is required")
    u = aggregate_channel(realization, theta)
    noise = np.sqrt(sigma_n2) * complex_gaussian(rng, u.shape)
    return c_coef * (np.sqrt(tau_p * p_p) * u + noise)


def monte_carlo_sinr(state: ChannelState, theta, eta, rho_d: float, trials: int, rng,
                     tau_p: int | None = None, p_p: float = 1.0, sigma_n2: float = 1.0,
                     chunk: int = 20_000, return_terms: bool = False):
    """Empirical UatF SINR from fresh channel and pilot-noise draws.

    Returns ``|D_k|^2 / (var(BU_k) + E|MUI_k|^2 + sigma_n2)`` with every
    expectation replaced by a sample average over ``trials`` draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tau_p = state.K if tau_p is None else tau_p
    stats = estimation_stats(state, theta, tau_p, p_p)
    eta = np.asarray(eta, dtype=float)
    K = state.K
    sqrt_eta_rho = np.sqrt(eta * rho_d)

    desired = []
    mui_power = []
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        real = draw_small_scale(state, rng, count=n)
        u = aggregate_channel(real, theta)
        noise = np.sqrt(sigma_n2) * complex_gaussian(rng, u.shape)
        u_hat = stats.c_coef * (np.sqrt(tau_p * p_p) * u + noise)
        # a[t, k, k'] = sum_m sqrt(eta_mk' rho) u_mk conj(u_hat_mk')
        a = np.einsum("tmk,tmj->tkj", u, sqrt_eta_rho * u_hat.conj())
        diag = np.einsum("tkk->tk", a)
        desired.append(diag)
        off = np.abs(a) ** 2
        off[:, np.arange(K), np.arange(K)] = 0.0
        mui_power.append(off.sum(axis=2))
        done += n

    desired = np.concatenate(desired)
    mui_power = np.concatenate(mui_power)
    D = desired.mean(axis=0)
    if trials > 1:
        bu_var = np.var(desired, axis=0, ddof=1)
    else:
        bu_var = np.zeros(K)
    mui = mui_power.mean(axis=0)
    sinr = np.abs(D) ** 2 / (bu_var + mui + sigma_n2)
    if return_terms:
        return sinr, {"D": D, "BU": bu_var, "MUI": mui}
    return sinr
