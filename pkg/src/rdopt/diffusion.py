"""Noise schedule, forward noising, training loop and the two samplers.

Phases live in a normalized domain ``x = (theta - pi) / pi``; samples are
mapped back with a wrap so every returned phase lies in [0, 2*pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import PhaseVector
from .denoiser import (AdamState, DenoiserParams, adam_step, backbone, denoiser_backward, embed,
                       time_embedding)


@dataclass
class NoiseSchedule:
    v: np.ndarray  # index t-1 holds step t
    m: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.v)

    def alpha_at(self, t: int) -> float:
        """Cumulative product with the convention alpha_0 = 1."""
        return 1.0 if t == 0 else float(self.alpha[t - 1])


def build_schedule(T: int, v_first: float = 1e-4, v_last: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < v_first <= v_last < 1.0:
        raise ValueError(f"need 0 < v_first <= v_last < 1, got {v_first}, {v_last}")
    v = np.linspace(v_first, v_last, T)
    m = 1.0 - v
    alpha = np.cumprod(m)
    alpha_prev = np.concatenate([[1.0], alpha[:-1]])
    sigma = np.sqrt((1.0 - alpha_prev) / (1.0 - alpha) * v)
    return NoiseSchedule(v=v, m=m, alpha=alpha, sigma=sigma)


def normalize_phase(theta) -> np.ndarray:
    return (np.asarray(theta, dtype=float) - np.pi) / np.pi


def denormalize_phase(x) -> np.ndarray:
    return np.mod((np.asarray(x, dtype=float) + 1.0) * np.pi, 2.0 * np.pi)


def forward_noise(theta0_norm, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form draw of the noised phase at step ``t`` (scalar or per-row array)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    a = schedule.alpha[t - 1]
    if np.ndim(a):
        a = a[:, None]
    return np.sqrt(a) * theta0_norm + np.sqrt(1.0 - a) * eps


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    lr: float = 5e-4
    lr_final: float = 1e-5
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))


def train(conditions, thetas, params: DenoiserParams, schedule: NoiseSchedule, config: TrainConfig,
          adam: AdamState | None = None, on_batch=None):
    """Noise-prediction training on (condition, expert phase) pairs.

    ``thetas`` are raw phases in [0, 2*pi). Each epoch shuffles the pairs,
    draws one step and one noise vector per pair, and takes one Adam step per
    mini-batch. Returns ``(params, adam, epoch_losses)``; the epoch loss is
    the mean of its mini-batch losses. ``on_batch`` (if given) receives the
    exact batch arrays and loss, which lets callers recompute the loss.
    """
    conditions = np.asarray(conditions, dtype=float)
    x0 = normalize_phase(thetas)
    if len(x0) == 0:
        raise ValueError("empty dataset")
    if x0.shape[1] != params.N or conditions.shape[1] != params.dim_c:
        raise ValueError(
            f"dataset dims (N={x0.shape[1]}, dim_c={conditions.shape[1]}) do not match "
            f"network (N={params.N}, dim_c={params.dim_c})"
        )
    rng = np.random.default_rng(config.seed)
    adam = adam or AdamState.zeros_like(params)
    losses = []
    n = len(x0)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), params.N))
            xt = forward_noise(x0[idx], t, eps, schedule)
            loss, grads = denoiser_backward(params, xt, conditions[idx], t, eps)
            if on_batch is not None:
                on_batch(xt, conditions[idx], t, eps, loss)
            adam_step(params, grads, adam, lr)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
    return params, adam, np.array(losses)


class _Network:
    """Counts evaluations and reuses the condition half of the embedding."""

    def __init__(self, params: DenoiserParams, condition, predictor=None):
        self.params = params
        self.calls = 0
        self.predictor = predictor
        self.condition = condition
        if predictor is None:
            W = params.weights
            cond = np.atleast_2d(np.asarray(condition, dtype=float))
            emb0, _ = embed(params, cond, np.zeros(1))
            # keep only the condition part; time terms are added per step
            self.cond_emb = emb0 - time_embedding(np.zeros(1)) @ W["time_w"]
            self._time_cache = {}

    def __call__(self, x, t):
        self.calls += 1
        if self.predictor is not None:
            return self.predictor(x, self.condition, t)
        emb = self._time_cache.get(t)
        if emb is None:
            emb = self.cond_emb + time_embedding(np.array([t])) @ self.params.weights["time_w"]
            self._time_cache[t] = emb
        out, _ = backbone(self.params, x[None], emb)
        return out[0]


ENGINES = ("compiled", "numpy")


def _run_steps(params, condition, steps, a, b, s, z, x, predictor, engine):
    """Shared recursion ``x <- (x - b_i * eps_hat(x, t_i)) * a_i + s_i * z_i``.

    Returns ``(x, evaluations)``. The compiled engine is used only for the
    real network; a custom ``predictor`` always runs in Python.
    """
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}")
    if predictor is None and engine == "compiled":
        from .fastpath import run_chain

        cond = np.atleast_2d(np.asarray(condition, dtype=float))
        embs, _ = embed(params, np.broadcast_to(cond, (len(steps), params.dim_c)), np.asarray(steps))
        return run_chain(params, x, embs, a, b, s, z), len(steps)
    net = _Network(params, condition, predictor)
    for i, t in enumerate(steps):
        x = (x - b[i] * net(x, int(t))) * a[i] + s[i] * z[i]
    return x, net.calls


def ddpm_sample(params: DenoiserParams, condition, schedule: NoiseSchedule, rng: np.random.Generator,
                predictor=None, stochastic: bool = True, return_info: bool = False, engine: str = "compiled"):
    """Ancestral sampling over all T steps; no noise is injected at t = 1.

    ``predictor(x, condition, t)`` replaces the network when given (used by
    tests); ``stochastic=False`` drops every sigma_t term. ``engine``
    selects the compiled loop or the plain numpy network; both consume the
    generator identically.
    """
    N, T = params.N, schedule.T
    x_T = rng.standard_normal(N)
    steps = np.arange(T, 0, -1)
    idx = steps - 1
    a = 1.0 / np.sqrt(schedule.m[idx])
    b = schedule.v[idx] / np.sqrt(1.0 - schedule.alpha[idx])
    z = np.zeros((T, N))
    if stochastic:
        s = np.where(steps > 1, schedule.sigma[idx], 0.0)
        z[:T - 1] = rng.standard_normal((T - 1, N))
    else:
        s = np.zeros(T)
    x, calls = _run_steps(params, condition, steps, a, b, s, z, x_T.copy(), predictor, engine)
    phase = PhaseVector.from_normalized(x)
    if return_info:
        return phase, {"evaluations": calls, "x_T": x_T, "x_0": x}
    return phase


def substeps(T: int, S: int) -> np.ndarray:
    """Uniformly spaced sub-steps tau_i = round(i*T/S), i = 1..S."""
    if not 1 <= S <= T:
        raise ValueError(f"S must lie in [1, {T}], got {S}")
    return np.array([int(round(i * T / S)) for i in range(1, S + 1)])


DDIM_UPDATES = ("standard", "tied")


def ddim_sample(params: DenoiserParams, condition, schedule: NoiseSchedule, S: int, rng: np.random.Generator,
                predictor=None, update: str = "standard", respace: bool = True, x_T=None,
                return_info: bool = False, engine: str = "compiled"):
    """Deterministic implicit sampler over S sub-steps.

    At ``t = tau_i`` with previous sub-step ``s = tau_{i-1}`` (tau_0 = 0) and
    jump ratio ``m = alpha_t / alpha_s``:

    * ``update="standard"``:
      ``x <- (x - (sqrt(1 - alpha_t) - sqrt(m) * sqrt(1 - alpha_s)) * eps) / sqrt(m)``
    * ``update="tied"``:
      ``x <- (x - sqrt(1 - alpha_t) * (1 - sqrt(m)) * eps) / sqrt(m)``, i.e.
      the standard step with ``sqrt(1 - alpha_s)`` replaced by
      ``sqrt(1 - alpha_t)``. It under-removes noise on long jumps.

    ``respace=False`` (tied update only) uses the single-step ``m_t`` so
    each sub-step moves from t to t - 1 only. All variants call the network
    exactly S times.
    """
    if update not in DDIM_UPDATES:
        raise ValueError(f"update must be one of {DDIM_UPDATES}")
    if update == "standard" and not respace:
        raise ValueError("the standard update always jumps between sub-steps")
    taus = substeps(schedule.T, S)
    N = params.N
    x = rng.standard_normal(N) if x_T is None else np.array(x_T, dtype=float)
    if x.shape != (N,):
        raise ValueError(f"x_T must have shape ({N},)")
    start = x.copy()
    prev = np.concatenate([[0], taus[:-1]])
    steps = taus[::-1]
    a_t = np.array([schedule.alpha_at(int(t)) for t in steps])
    a_s = np.array([schedule.alpha_at(int(t)) for t in prev[::-1]])
    m = a_t / a_s if respace else schedule.m[steps - 1]
    if update == "standard":
        coef = np.sqrt(1.0 - a_t) - np.sqrt(m) * np.sqrt(1.0 - a_s)
    else:
        coef = np.sqrt(1.0 - a_t) * (1.0 - np.sqrt(m))
    x, calls = _run_steps(params, condition, steps, 1.0 / np.sqrt(m), coef, np.zeros(S), np.zeros((S, N)),
                          x, predictor, engine)
    phase = PhaseVector.from_normalized(x)
    if return_info:
        return phase, {"evaluations": calls, "x_T": start, "x_0": x, "substeps": taus}
    return phase
