import csv
import json

import numpy as np
import pytest

from rdopt import cli, experiments
from rdopt.config import PROFILES, ConfigError, ExperimentConfig, load_config
from rdopt.denoiser import denoiser_forward, init_params, load_checkpoint
from rdopt.diffusion import build_schedule
from rdopt.expert import ExpertDataset, fitness
from rdopt.channel import draw_drop

TINY = dict(M=2, K=1, N=4, ga_population=6, ga_generations=4, dataset_samples=6, T=10, S=2, epochs=3,
            rho_db=[0.0, 20.0], drops_per_point=2, random_draws=5, bench_reps=2)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "out")}))
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config

def test_profiles_and_overrides(tmp_path):
    desk = load_config()
    assert (desk.M, desk.K, desk.N, desk.T, desk.S) == (8, 3, 16, 200, 10)
    paper = load_config(profile="paper")
    assert (paper.M, paper.K, paper.N, paper.T, paper.S) == (64, 12, 64, 1000, 20)
    assert load_config(seed=9, out_dir=None).seed == 9
    assert set(PROFILES) == {"desk", "paper"}


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"M": "8"}, {"S": 500}, {"ddim_update": "x"}, {"N": 15},
                                 {"rho_db": []}, {"shadow_fading": 1}, {"rho_db": ["a"]}, [1, 2]])
def test_bad_config_rejected(tmp_path, doc):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")
    with pytest.raises(ConfigError):
        load_config(profile="huge")


def test_int_values_accepted_for_floats(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lr": 1, "rho_db": [0, 10]}))
    cfg = load_config(path)
    assert cfg.lr == 1.0 and cfg.rho_db == [0.0, 10.0]


def test_config_builders():
    cfg = ExperimentConfig()
    sysc = cfg.system()
    assert sysc.tau_p == cfg.K and sysc.p_p == pytest.approx(1000.0)
    assert cfg.ga().population == cfg.ga_population
    assert cfg.schedule().T == cfg.T
    assert cfg.train_config(epochs=3).epochs == 3
    assert cfg.to_dict()["M"] == 8


def test_planar_grid():
    assert experiments.planar_grid(16) is None
    assert experiments.planar_grid(8) == (2, 4)
    assert experiments.planar_grid(2) == (1, 2)
    assert experiments.planar_grid(6) == (2, 3)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("RDOPT_THREADS", "3")
    assert experiments.worker_count() == 3
    monkeypatch.setenv("RDOPT_THREADS", "zero")
    assert experiments.worker_count() == 1


# ---------------------------------------------------------------- commands end to end

def test_cli_pipeline(tiny_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["gen-dataset", "--config", str(tiny_config)]) == 0
    ds = ExpertDataset.load(out / "dataset.rdop")
    assert len(ds) == 6
    rows = _read_csv(out / "dataset.csv")
    assert len(rows) == 7

    ck = out / "net.rdnw"
    assert cli.main(["train", "--config", str(tiny_config), "--dataset", str(out / "dataset.rdop"),
                     "--checkpoint", str(ck)]) == 0
    loss_rows = _read_csv(out / "net_loss.csv")
    assert loss_rows[0] == ["epoch", "loss"] and len(loss_rows) == 1 + TINY["epochs"]
    params, _, mean, std = load_checkpoint(ck)
    assert np.array_equal(mean, ds.cond_mean) and np.array_equal(std, ds.cond_std)

    assert cli.main(["sweep", "--config", str(tiny_config), "--checkpoint", str(ck)]) == 0
    sweep = _read_csv(out / "sweep.csv")
    assert sweep[0] == ["rho_d_dB", "method", "mean_sum_se", "std_sum_se", "drops"]
    assert {r[1] for r in sweep[1:]} == {"random", "ga", "gcdm", "gcdim-2"}
    assert len(sweep) == 1 + 2 * 4
    by = {(float(r[0]), r[1]): float(r[2]) for r in sweep[1:]}
    for rho in (0.0, 20.0):
        assert by[(rho, "ga")] >= by[(rho, "random")]
    for method in ("random", "ga"):
        assert by[(20.0, method)] >= by[(0.0, method)]

    assert cli.main(["bench", "--config", str(tiny_config), "--checkpoint", str(ck)]) == 0
    bench = _read_csv(out / "bench.csv")
    evals = {r[0]: int(r[2]) for r in bench[1:]}
    assert evals == {"ga": 0, "gcdm": 10, "gcdim-2": 2}
    printed = capsys.readouterr().out
    assert "median" in printed and "wrote 6 records" in printed


def test_gen_dataset_bit_identical_and_beats_random(tiny_config, tmp_path):
    cfg = load_config(tiny_config)
    a = experiments.cmd_gen_dataset(cfg, tmp_path / "a.rdop")
    experiments.cmd_gen_dataset(cfg, tmp_path / "b.rdop")
    assert (tmp_path / "a.rdop").read_bytes() == (tmp_path / "b.rdop").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a["samples"] == 6
    # records beat the random-phase mean on average
    ds = ExpertDataset.load(tmp_path / "a.rdop")
    seeds = np.random.default_rng(cfg.seed).integers(0, 2**63 - 1, size=6)
    rand = []
    for i, seed in enumerate(seeds):
        st = draw_drop(cfg.system(), np.random.default_rng(int(seed)))
        rand.append(experiments.random_baseline(st, 10 ** (ds.rho_d_dB[i] / 10), cfg.system(), 100,
                                                np.random.default_rng(i)))
    assert ds.achieved_se.mean() > np.mean(rand)


def test_train_reload_probe_and_mismatch(tiny_config, tmp_path):
    cfg = load_config(tiny_config)
    experiments.cmd_gen_dataset(cfg, tmp_path / "d.rdop")
    res = experiments.cmd_train(cfg, tmp_path / "d.rdop", tmp_path / "n.rdnw")
    assert len(res["losses"]) == cfg.epochs
    params, _, _, _ = load_checkpoint(tmp_path / "n.rdnw")
    again = experiments.cmd_train(cfg, tmp_path / "d.rdop", tmp_path / "m.rdnw")
    assert (tmp_path / "n.rdnw").read_bytes() == (tmp_path / "m.rdnw").read_bytes()
    assert np.array_equal(res["losses"], again["losses"])
    probe = np.random.default_rng(0).standard_normal((2, 4)), np.zeros((2, params.dim_c)), np.array([1, 5])
    q, _, _, _ = load_checkpoint(tmp_path / "m.rdnw")
    assert np.array_equal(denoiser_forward(params, *probe), denoiser_forward(q, *probe))
    other = load_config(tiny_config, N=16)
    with pytest.raises(ValueError):
        experiments.cmd_train(other, tmp_path / "d.rdop")


def test_benchmark_counts_untrained():
    cfg = load_config(**{k: v for k, v in TINY.items() if k not in ("rho_db",)})
    params = init_params(4, 7, np.random.default_rng(0))
    rows = experiments.benchmark(params, build_schedule(30), 3, cfg, include_ga=False, reps=1)
    assert [(m, n) for m, _, n in rows] == [("gcdm", 30), ("gcdim-3", 3)]
    assert all(t > 0 for _, t, _ in rows)


def test_time_call_discards_warmup():
    calls = []
    experiments.time_call(lambda: calls.append(1), 5)
    assert len(calls) == 6


# ---------------------------------------------------------------- validate and exit codes

def test_validate_passes_and_reports_numbers(capsys):
    assert cli.main(["validate", "--seed", "0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(ln.startswith("PASS") for ln in lines)
    assert all("e-" in ln or "e+" in ln for ln in lines)


def test_validate_catches_corrupted_delta(capsys):
    assert cli.main(["validate", "--corrupt-delta"]) == 1
    out = capsys.readouterr().out
    assert "FAIL closed_form_sinr_rel_err" in out


def test_bad_input_exit_codes(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"nope": 1}')
    assert cli.main(["validate", "--config", str(tmp_path / "c.json")]) == 2
    assert cli.main(["train", "--dataset", str(tmp_path / "missing.rdop"), "--out", str(tmp_path)]) == 2
    (tmp_path / "junk.rdnw").write_bytes(b"junk")
    assert cli.main(["bench", "--checkpoint", str(tmp_path / "junk.rdnw"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err
