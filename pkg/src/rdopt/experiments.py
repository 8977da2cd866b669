"""Experiment commands behind the CLI: dataset, training, sweep, timing, validation."""

from __future__ import annotations

import logging
import os
import time
from pathlib import Path

import numpy as np

from .channel import SystemConfig, build_ris_correlation, cascaded_second_moment, complex_gaussian, draw_drop, sqrt_psd
from .config import ExperimentConfig
from .denoiser import AdamState, denoiser_backward, init_params, load_checkpoint, save_checkpoint
from .diffusion import ddim_sample, ddpm_sample, train
from .estimation import estimation_stats, monte_carlo_sinr, power_control_full, sinr_closed_form
from .expert import (ExpertDataset, atomic_write_csv, fitness, ga_optimize, generate_dataset, parallel_map,
                     raw_condition)

log = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RDOPT_THREADS", "1")))
    except ValueError:
        return 1


def _out(cfg: ExperimentConfig, name: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def random_baseline(state, rho, system: SystemConfig, draws: int, rng) -> float:
    thetas = rng.uniform(0.0, 2.0 * np.pi, size=(draws, state.N))
    return float(np.mean(fitness(state, thetas, rho, system)))


def cmd_gen_dataset(cfg: ExperimentConfig, path=None) -> dict:
    system = cfg.system()
    rng = np.random.default_rng(cfg.seed)
    ds = generate_dataset(system, cfg.rho_db, cfg.dataset_samples, cfg.ga(), rng,
                          include_rho=cfg.include_rho, workers=worker_count())
    path = Path(path) if path else _out(cfg, "dataset.rdop")
    ds.save(path)
    ds.export_csv(path.with_suffix(".csv"))
    summary = {"path": str(path), "samples": len(ds), "mean_achieved_se": float(ds.achieved_se.mean())}
    log.info("wrote %d expert records to %s", len(ds), path)
    return summary


def cmd_train(cfg: ExperimentConfig, dataset_path, checkpoint_path=None, **train_overrides) -> dict:
    ds = ExpertDataset.load(dataset_path)
    if ds.N != cfg.N:
        raise ValueError(f"dataset N={ds.N} differs from config N={cfg.N}")
    params = init_params(ds.N, ds.condition_dim, np.random.default_rng(cfg.seed))
    params, adam, losses = train(ds.conditions, ds.thetas, params, cfg.schedule(),
                                 cfg.train_config(**train_overrides))
    ckpt = Path(checkpoint_path) if checkpoint_path else _out(cfg, "denoiser.rdnw")
    save_checkpoint(ckpt, params, adam, ds.cond_mean, ds.cond_std)
    loss_csv = ckpt.with_name(ckpt.stem + "_loss.csv")
    atomic_write_csv(loss_csv, [["epoch", "loss"]] + [[e + 1, repr(float(v))] for e, v in enumerate(losses)])
    return {"checkpoint": str(ckpt), "loss_csv": str(loss_csv), "losses": losses}


def _condition(state, rho_db, mean, std, include_rho):
    raw = raw_condition(state, rho_db if include_rho else None)
    return (raw - mean) / std


def _sweep_point(args):
    cfg, ckpt_path, rho_db, seed = args
    system = cfg.system()
    params, _, mean, std = load_checkpoint(ckpt_path)
    schedule = cfg.schedule()
    # the same drops at every power level, so the curves are comparable point to point
    drop_rng = np.random.default_rng([cfg.seed, 1])
    rng = np.random.default_rng(seed)
    rho = 10.0 ** (rho_db / 10.0)
    rows = {"random": [], "ga": [], "gcdm": [], f"gcdim-{cfg.S}": []}
    for _ in range(cfg.drops_per_point):
        state = draw_drop(system, drop_rng)
        cond = _condition(state, rho_db, mean, std, cfg.include_rho)
        rows["random"].append(random_baseline(state, rho, system, cfg.random_draws, rng))
        theta, _ = ga_optimize(state, rho, cfg.ga(), rng, system)
        rows["ga"].append(fitness(state, theta, rho, system))
        rows["gcdm"].append(fitness(state, ddpm_sample(params, cond, schedule, rng).theta, rho, system))
        phase = ddim_sample(params, cond, schedule, cfg.S, rng, update=cfg.ddim_update)
        rows[f"gcdim-{cfg.S}"].append(fitness(state, phase.theta, rho, system))
    return rho_db, rows


def cmd_sweep(cfg: ExperimentConfig, checkpoint_path, results_path=None) -> list:
    """Mean/std sum SE of every method at each power level; one row per (power, method)."""
    seeds = np.random.default_rng(cfg.seed).integers(0, 2**63 - 1, size=len(cfg.rho_db))
    jobs = [(cfg, str(checkpoint_path), float(r), int(s)) for r, s in zip(cfg.rho_db, seeds)]
    results = parallel_map(_sweep_point, jobs, worker_count())
    table = []
    for rho_db, rows in results:
        for method, values in rows.items():
            values = np.asarray(values)
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            table.append((rho_db, method, float(values.mean()), std, len(values)))
    path = Path(results_path) if results_path else _out(cfg, "sweep.csv")
    atomic_write_csv(path, [["rho_d_dB", "method", "mean_sum_se", "std_sum_se", "drops"]]
                     + [[repr(r), m, repr(mu), repr(sd), n] for r, m, mu, sd, n in table])
    return table


def time_call(fn, reps: int) -> float:
    """Median wall-clock over ``reps`` calls after one discarded warm-up."""
    fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def benchmark(params, schedule, S, cfg: ExperimentConfig, state=None, cond=None, rho_db=20.0,
              include_ga=True, reps=None) -> list:
    """Rows ``(method, median_s, denoiser_evals)``."""
    reps = reps or cfg.bench_reps
    rng = np.random.default_rng(cfg.seed)
    system = cfg.system()
    if cond is None:
        cond = np.zeros(params.dim_c)
    _, info_ddpm = ddpm_sample(params, cond, schedule, rng, return_info=True)
    _, info_ddim = ddim_sample(params, cond, schedule, S, rng, update=cfg.ddim_update, return_info=True)
    rows = []
    if include_ga:
        state = state if state is not None else draw_drop(system, rng)
        rho = 10.0 ** (rho_db / 10.0)
        rows.append(("ga", time_call(lambda: ga_optimize(state, rho, cfg.ga(), rng, system), reps), 0))
    rows.append(("gcdm", time_call(lambda: ddpm_sample(params, cond, schedule, rng), reps),
                 info_ddpm["evaluations"]))
    rows.append((f"gcdim-{S}", time_call(lambda: ddim_sample(params, cond, schedule, S, rng,
                                                              update=cfg.ddim_update), reps),
                 info_ddim["evaluations"]))
    return rows


def cmd_bench(cfg: ExperimentConfig, checkpoint_path, results_path=None) -> list:
    params, _, mean, std = load_checkpoint(checkpoint_path)
    rng = np.random.default_rng(cfg.seed)
    state = draw_drop(cfg.system(), rng)
    cond = _condition(state, cfg.rho_db[0], mean, std, cfg.include_rho)
    rows = benchmark(params, cfg.schedule(), cfg.S, cfg, state=state, cond=cond)
    path = Path(results_path) if results_path else _out(cfg, "bench.csv")
    atomic_write_csv(path, [["method", "median_s", "denoiser_evals"]] + [[m, repr(t), n] for m, t, n in rows])
    return rows


# ---------------------------------------------------------------- validation

def planar_grid(N: int):
    """Most nearly square (rows, cols) layout; None when N is a perfect square."""
    rows = int(np.sqrt(N))
    if rows * rows == N:
        return None
    while N % rows:
        rows -= 1
    return (rows, N // rows)


def closed_form_check(rng, drops=3, thetas=2, trials=20_000, corrupt=False, M=4, K=2, N=8, rho_grid_db=None):
    """Worst relative error of Monte-Carlo vs closed-form SINR over random drops and phases.

    Runs on the all-three-slope channel, where the cascaded path is weak and
    the aggregated channel is close to Gaussian. ``corrupt`` inflates the
    cascaded variance in the closed-form path (mutation hook).
    """
    system = SystemConfig.three_slope(M=M, K=K, N=N, ris_grid=planar_grid(N))
    R = build_ris_correlation(N, system.ris_element_spacing_m, system.wavelength_m, grid=system.ris_grid)
    rho_grid_db = rho_grid_db or [-10.0, 0.0, 10.0, 20.0, 30.0, 40.0]
    worst = 0.0
    for d in range(drops):
        state = draw_drop(system, rng, R=R)
        rho = 10.0 ** (rho_grid_db[d % len(rho_grid_db)] / 10.0)
        for _ in range(thetas):
            theta = rng.uniform(0.0, 2.0 * np.pi, N)
            stats = estimation_stats(state, theta, system.tau_p, system.p_p)
            eta = power_control_full(stats.gamma)
            if corrupt:
                stats.delta = stats.delta * 1.5
            cf = sinr_closed_form(stats, eta, rho, system.sigma_n2)
            mc = monte_carlo_sinr(state, theta, eta, rho, trials, rng, tau_p=system.tau_p, p_p=system.p_p,
                                  sigma_n2=system.sigma_n2)
            worst = max(worst, float(np.max(np.abs(mc / cf - 1.0))))
    return worst


def random_psd(rng, N, rank=None):
    A = complex_gaussian(rng, (N, rank or N))
    return A @ A.conj().T / (rank or N)


def cascade_moment_check(rng, cases=5, draws=100_000, N=8):
    """Worst relative error of sampled E|h^H Theta g|^2 against the trace formula."""
    worst = 0.0
    for _ in range(cases):
        R_mr, R_rk = random_psd(rng, N), random_psd(rng, N)
        theta = rng.uniform(0.0, 2.0 * np.pi, N)
        g = complex_gaussian(rng, (draws, N)) @ sqrt_psd(R_mr).T
        h = complex_gaussian(rng, (draws, N)) @ sqrt_psd(R_rk).T
        x = np.sum(h.conj() * np.exp(1j * theta) * g, axis=1)
        sampled = np.mean(np.abs(x) ** 2)
        exact = cascaded_second_moment(R_mr, R_rk, theta)
        worst = max(worst, abs(sampled / exact - 1.0))
    return worst


def gradient_check(rng, coords=100, N=8, dim_c=6, batch=3, step=1e-5):
    """Max relative error of analytic gradients against central differences.

    Coordinates are sampled round-robin over every weight tensor so each
    layer type is covered. The output projection is randomized, otherwise
    its zero init would make every upstream gradient vanish.
    """
    params = init_params(N, dim_c, rng)
    for name in ("out_w", "out_b", "ln_g", "ln_b"):
        params.weights[name] = params.weights[name] + rng.normal(0.0, 0.3, params.weights[name].shape)
    x = rng.standard_normal((batch, N))
    c = rng.standard_normal((batch, dim_c))
    t = rng.integers(1, 200, size=batch)
    eps = rng.standard_normal((batch, N))
    _, grads = denoiser_backward(params, x, c, t, eps)
    names = list(params.weights)
    worst = 0.0
    per_layer = {}
    for i in range(coords):
        name = names[i % len(names)]
        w = params.weights[name]
        idx = tuple(int(rng.integers(0, s)) for s in w.shape)
        old = w[idx]
        w[idx] = old + step
        lp, _ = denoiser_backward(params, x, c, t, eps)
        w[idx] = old - step
        lm, _ = denoiser_backward(params, x, c, t, eps)
        w[idx] = old
        fd = (lp - lm) / (2.0 * step)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        per_layer[name] = max(per_layer.get(name, 0.0), rel)
        worst = max(worst, rel)
    return worst, per_layer


def cmd_validate(cfg: ExperimentConfig, corrupt_delta: bool = False, quick: bool = True) -> list:
    """Rows ``(check, measured, tolerance, passed)``."""
    rng = np.random.default_rng(cfg.seed)
    if quick:
        sinr_err = closed_form_check(rng, drops=3, thetas=2, trials=cfg.mc_trials, corrupt=corrupt_delta)
        moment_err = cascade_moment_check(rng, cases=5, draws=cfg.mc_trials)
    else:
        sinr_err = closed_form_check(rng, drops=10, thetas=10, trials=cfg.mc_trials, corrupt=corrupt_delta)
        moment_err = cascade_moment_check(rng, cases=20, draws=cfg.mc_trials)
    grad_err, _ = gradient_check(rng)
    rows = [
        ("closed_form_sinr_rel_err", sinr_err, 0.02),
        ("cascaded_moment_rel_err", moment_err, 0.02),
        ("gradient_rel_err", grad_err, 1e-4),
    ]
    return [(name, value, tol, bool(value <= tol)) for name, value, tol in rows]
