"""Genetic-algorithm expert, exhaustive grid oracle and the expert dataset."""

from __future__ import annotations

import csv
import itertools
import os
import struct
from dataclasses import dataclass

import numpy as np

from .channel import ChannelState, SystemConfig, draw_drop
from .estimation import estimation_stats, power_control_full, sinr_closed_form, sum_se

TWO_PI = 2.0 * np.pi
DATASET_MAGIC = b"RDOP1"


@dataclass(frozen=True)
class GAConfig:
    population: int = 50
    generations: int = 150
    elite: int = 2
    tournament_size: int = 3
    crossover_rate: float = 0.9
    blend_alpha: float = 0.5
    mutation_rate: float = 0.1
    mutation_sigma_rad: float = 0.3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 0 <= self.elite < self.population:
            raise ValueError("elite must be smaller than population")
        if self.generations < 1 or self.tournament_size < 1:
            raise ValueError("generations and tournament_size must be positive")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


def fitness(state: ChannelState, theta, rho_d: float, config: SystemConfig) -> float:
    """Closed-form sum SE of one phase vector under full-power conjugate beamforming.

    Also accepts a batch of phase vectors along leading axes and then returns
    an array.
    """
    stats = estimation_stats(state, theta, config.tau_p, config.p_p)
    eta = power_control_full(stats.gamma)
    delta_k = sinr_closed_form(stats, eta, rho_d, config.sigma_n2)
    se = sum_se(delta_k, config.tau_d, config.tau_c)
    return float(se) if np.ndim(se) == 0 else se


def ga_optimize(state: ChannelState, rho_d: float, ga: GAConfig, rng: np.random.Generator,
                config: SystemConfig):
    """Elitist real-coded GA over the phase vector.

    Returns ``(theta_best, trace)`` where ``trace[g]`` is the best fitness
    seen up to and including generation ``g``.
    """
    N = state.N
    pop = rng.uniform(0.0, TWO_PI, size=(ga.population, N))
    best_theta, best_fit = None, -np.inf
    trace = []
    for _ in range(ga.generations):
        scores = np.array([fitness(state, ind, rho_d, config) for ind in pop])
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_fit:
            best_fit = float(scores[order[0]])
            best_theta = pop[order[0]].copy()
        trace.append(best_fit)

        children = [pop[i].copy() for i in order[: ga.elite]]
        while len(children) < ga.population:
            a = _tournament(pop, scores, ga.tournament_size, rng)
            b = _tournament(pop, scores, ga.tournament_size, rng)
            if rng.random() < ga.crossover_rate:
                a, b = _blend(a, b, ga.blend_alpha, rng)
            for child in (a, b):
                mask = rng.random(N) < ga.mutation_rate
                child = child + mask * rng.normal(0.0, ga.mutation_sigma_rad, N)
                children.append(np.mod(child, TWO_PI))
        pop = np.array(children[: ga.population])
    return best_theta, np.array(trace)


def _tournament(pop, scores, size, rng):
    idx = rng.integers(0, len(pop), size=size)
    return pop[idx[np.argmax(scores[idx])]].copy()


def _blend(a, b, alpha, rng):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    span = hi - lo
    lo, hi = lo - alpha * span, hi + alpha * span
    return rng.uniform(lo, hi), rng.uniform(lo, hi)


def brute_force_phase(state: ChannelState, rho_d: float, grid_points: int, config: SystemConfig,
                      return_count: bool = False):
    """Exhaustive search over a uniform phase grid; only for N <= 3."""
    N = state.N
    if N > 3:
        raise ValueError(f"exhaustive search refused for N={N} (limit 3)")
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    axis = np.arange(grid_points) * (TWO_PI / grid_points)
    candidates = np.array(list(itertools.product(axis, repeat=N)))
    scores = fitness(state, candidates, rho_d, config)
    best = candidates[int(np.argmax(scores))]
    if return_count:
        return best, len(candidates)
    return best


@dataclass
class ExpertRecord:
    condition: np.ndarray
    theta0: np.ndarray
    rho_d_dB: float
    achieved_se: float


class ExpertDataset:
    """Normalized conditions, expert phases and metadata, stored as arrays."""

    def __init__(self, M, K, N, conditions, thetas, rho_d_dB, achieved_se, cond_mean, cond_std):
        self.M, self.K, self.N = int(M), int(K), int(N)
        self.conditions = np.asarray(conditions, dtype=np.float64)
        self.thetas = np.asarray(thetas, dtype=np.float64)
        self.rho_d_dB = np.asarray(rho_d_dB, dtype=np.float64)
        self.achieved_se = np.asarray(achieved_se, dtype=np.float64)
        self.cond_mean = np.asarray(cond_mean, dtype=np.float64)
        self.cond_std = np.asarray(cond_std, dtype=np.float64)

    def __len__(self):
        return len(self.thetas)

    def __getitem__(self, i) -> ExpertRecord:
        return ExpertRecord(self.conditions[i], self.thetas[i], float(self.rho_d_dB[i]),
                            float(self.achieved_se[i]))

    @property
    def condition_dim(self) -> int:
        return self.conditions.shape[1]

    def normalize(self, raw_condition) -> np.ndarray:
        return (np.asarray(raw_condition) - self.cond_mean) / self.cond_std

    def save(self, path) -> None:
        header = DATASET_MAGIC + struct.pack("<5Q", self.M, self.K, self.N, len(self), self.condition_dim)
        body = np.concatenate(
            [self.conditions, self.thetas, self.rho_d_dB[:, None], self.achieved_se[:, None]], axis=1
        )
        payload = header + self.cond_mean.astype("<f8").tobytes() + self.cond_std.astype("<f8").tobytes()
        payload += np.ascontiguousarray(body, dtype="<f8").tobytes()
        atomic_write_bytes(path, payload)

    @classmethod
    def load(cls, path) -> "ExpertDataset":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:5] != DATASET_MAGIC:
            raise ValueError(f"{path}: not an expert dataset")
        M, K, N, count, dim = struct.unpack_from("<5Q", blob, 5)
        offset = 5 + 40
        stats = np.frombuffer(blob, dtype="<f8", count=2 * dim, offset=offset)
        offset += 16 * dim
        width = dim + N + 2
        body = np.frombuffer(blob, dtype="<f8", count=count * width, offset=offset).reshape(count, width)
        if offset + body.nbytes != len(blob):
            raise ValueError(f"{path}: trailing or missing bytes")
        return cls(M, K, N, body[:, :dim], body[:, dim:dim + N], body[:, -2], body[:, -1],
                   stats[:dim], stats[dim:])

    def export_csv(self, path) -> None:
        lines = []
        header = ([f"c{i}" for i in range(self.condition_dim)] + [f"theta{n}" for n in range(self.N)]
                  + ["rho_d_dB", "achieved_se"])
        lines.append(header)
        for i in range(len(self)):
            row = list(self.conditions[i]) + list(self.thetas[i]) + [self.rho_d_dB[i], self.achieved_se[i]]
            lines.append([repr(float(v)) for v in row])
        atomic_write_csv(path, lines)


def raw_condition(state: ChannelState, rho_d_dB: float | None = None) -> np.ndarray:
    cond = state.condition_db()
    if rho_d_dB is not None:
        cond = np.append(cond, rho_d_dB)
    return cond


def _expert_sample(args):
    config, rho_db, ga, seed = args
    rng = np.random.default_rng(seed)
    state = draw_drop(config, rng)
    rho = 10.0 ** (rho_db / 10.0)
    theta, _ = ga_optimize(state, rho, ga, rng, config)
    return state, theta, fitness(state, theta, rho, config)


def generate_dataset(config: SystemConfig, rho_grid_db, samples: int, ga: GAConfig,
                     rng: np.random.Generator, include_rho: bool = False, workers: int = 1) -> ExpertDataset:
    """Label ``samples`` fresh drops with GA phases, cycling through ``rho_grid_db``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    seeds = rng.integers(0, 2**63 - 1, size=samples)
    jobs = [(config, float(rho_grid_db[i % len(rho_grid_db)]), ga, int(seeds[i])) for i in range(samples)]
    results = parallel_map(_expert_sample, jobs, workers)

    raw = np.array([raw_condition(st, rho if include_rho else None)
                    for (st, _, _), (_, rho, _, _) in zip(results, jobs)])
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ExpertDataset(
        config.M, config.K, config.N,
        conditions=(raw - mean) / std,
        thetas=np.array([th for _, th, _ in results]),
        rho_d_dB=np.array([job[1] for job in jobs]),
        achieved_se=np.array([se for _, _, se in results]),
        cond_mean=mean,
        cond_std=std,
    )


def parallel_map(fn, items, workers: int = 1):
    """Ordered map; process pool when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _temp_beside(path) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return f"{path}.tmp{os.getpid()}"


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = _temp_beside(path)
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_csv(path, rows) -> None:
    path = os.fspath(path)
    tmp = _temp_beside(path)
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\r\n").writerows(rows)
    os.replace(tmp, path)
