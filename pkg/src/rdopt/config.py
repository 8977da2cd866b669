"""Flat experiment configuration with a desk-sized and a full-size profile."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .channel import SystemConfig
from .diffusion import DDIM_UPDATES, TrainConfig, build_schedule
from .expert import GAConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # system
    M: int = 8
    K: int = 3
    N: int = 16
    tau_c: int = 200
    tau_p: int = 0  # 0 means tau_p = K
    p_p_db: float = 30.0
    area_side_m: float = 1000.0
    carrier_hz: float = 1.9e9
    ris_hop_model: str = "log_distance"
    direct_blockage_db: float = 50.0
    snr_reference_db: float = -130.0
    shadow_fading: bool = False
    # expert
    ga_population: int = 50
    ga_generations: int = 150
    ga_elite: int = 2
    ga_tournament: int = 3
    ga_crossover_rate: float = 0.9
    ga_mutation_rate: float = 0.1
    ga_mutation_sigma: float = 0.3
    dataset_samples: int = 200
    include_rho: bool = False
    # diffusion
    T: int = 200
    S: int = 10
    v_first: float = 1e-4
    v_last: float = 0.02
    ddim_update: str = "standard"
    # training
    epochs: int = 500
    batch_size: int = 8
    lr: float = 5e-4
    lr_final: float = 1e-5
    lr_schedule: str = "cosine"
    # sweep / bench / validate
    rho_db: list = field(default_factory=lambda: [-10.0, 0.0, 10.0, 20.0, 30.0, 40.0])
    drops_per_point: int = 20
    random_draws: int = 100
    mc_trials: int = 100_000
    bench_reps: int = 5
    seed: int = 0
    out_dir: str = "out"

    def system(self, **overrides) -> SystemConfig:
        kw = dict(
            M=self.M, K=self.K, N=self.N, tau_c=self.tau_c, tau_p=self.tau_p or self.K,
            p_p=10.0 ** (self.p_p_db / 10.0), area_side_m=self.area_side_m, carrier_hz=self.carrier_hz,
            ris_hop_model=self.ris_hop_model, direct_blockage_db=self.direct_blockage_db,
            snr_reference_db=self.snr_reference_db, shadow_fading=self.shadow_fading,
        )
        kw.update(overrides)
        return SystemConfig(**kw)

    def ga(self) -> GAConfig:
        return GAConfig(population=self.ga_population, generations=self.ga_generations, elite=self.ga_elite,
                        tournament_size=self.ga_tournament, crossover_rate=self.ga_crossover_rate,
                        mutation_rate=self.ga_mutation_rate, mutation_sigma_rad=self.ga_mutation_sigma)

    def schedule(self):
        return build_schedule(self.T, self.v_first, self.v_last)

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, lr_final=self.lr_final,
                  lr_schedule=self.lr_schedule, seed=self.seed)
        kw.update(overrides)
        return TrainConfig(**kw)

    def validate(self) -> "ExperimentConfig":
        """Build every derived object once so bad values fail early."""
        try:
            self.system()
            self.ga()
            self.schedule()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.S <= self.T:
            raise ConfigError(f"S={self.S} must lie in [1, T={self.T}]")
        if self.ddim_update not in DDIM_UPDATES:
            raise ConfigError(f"ddim_update must be 'standard' or 'tied', got {self.ddim_update!r}")
        if self.N % 2:
            raise ConfigError(f"N={self.N} must be even for the denoiser")
        if not self.rho_db:
            raise ConfigError("rho_db must list at least one power level")
        for name in ("dataset_samples", "drops_per_point", "random_draws", "mc_trials", "bench_reps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "desk": {},
    "paper": dict(M=64, K=12, N=64, T=1000, S=20, dataset_samples=1000, epochs=500),
}


def load_config(path=None, profile: str = "desk", **overrides) -> ExperimentConfig:
    """Profile defaults, then the JSON file's keys, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = dict(PROFILES[profile])
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for f in fields(ExperimentConfig):
        if f.name in values:
            values[f.name] = _coerce(f.name, values[f.name], type(getattr(_DEFAULTS, f.name)))
    return ExperimentConfig(**values).validate()


def _coerce(name, value, kind):
    """Check one config value against the type of its default; ints widen to floats."""
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind is list:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = [float(v) for v in value] if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{name} must be {kind.__name__}, got {value!r}")
    return value


_DEFAULTS = ExperimentConfig()
