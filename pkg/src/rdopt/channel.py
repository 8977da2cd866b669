"""Geometry, large-scale fading, RIS spatial correlation and small-scale draws.

All large-scale coefficients handed to downstream code are *normalized*: they
are divided by ``10**(snr_reference_db / 10)`` so that the downlink power
``rho_d`` and pilot power ``p_p`` read as SNR values of a link whose physical
path gain equals the reference. The cascaded AP->RIS->user path picks up that
normalization once, through ``beta_mr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ChannelInputError(ValueError):
    """Raised for physically meaningless channel inputs."""


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions, frame split, powers and propagation constants.

    Powers are linear and normalized to ``sigma_n2``. Distances are meters
    except where a ``_km`` suffix says otherwise.
    """

    M: int = 8
    K: int = 3
    N: int = 16
    tau_c: int = 200
    tau_p: int | None = None
    p_p: float = 10.0 ** (30.0 / 10.0)
    rho_d: float = 10.0 ** (20.0 / 10.0)
    sigma_n2: float = 1.0
    area_side_m: float = 1000.0
    carrier_hz: float = 1.9e9
    ris_spacing_fraction: float = 0.25
    ap_height_m: float = 15.0
    user_height_m: float = 1.65
    ris_height_m: float = 15.0
    min_distance_m: float = 10.0
    shadow_fading: bool = False
    shadow_sigma_db: float = 8.0
    # "log_distance": RIS hops referenced at 1 m, element gain relative to an
    # isotropic aperture, obstructed direct links (RIS-relevant desk model).
    # "three_slope": every link three-slope, element area folded in m^2.
    ris_hop_model: str = "log_distance"
    direct_blockage_db: float = 50.0
    ris_ref_loss_db: float = 30.0
    ris_pathloss_exponent: float = 2.2
    snr_reference_db: float = -130.0
    ris_grid: tuple | None = None

    def __post_init__(self):
        if self.tau_p is None:
            object.__setattr__(self, "tau_p", self.K)
        if min(self.M, self.K, self.N) < 1:
            raise ChannelInputError("M, K and N must be positive")
        if self.tau_p < self.K:
            raise ChannelInputError(f"tau_p={self.tau_p} < K={self.K}: pilots cannot be orthogonal")
        if self.tau_c - self.tau_p <= 0:
            raise ChannelInputError("tau_c must exceed tau_p")
        if min(self.p_p, self.rho_d, self.sigma_n2) < 0:
            raise ChannelInputError("powers must be non-negative")
        if self.ris_grid is not None:
            if int(np.prod(self.ris_grid)) != self.N:
                raise ChannelInputError(f"ris_grid {self.ris_grid} does not hold N={self.N} elements")
        elif math.isqrt(self.N) ** 2 != self.N:
            raise ChannelInputError(f"N={self.N} is not a perfect square")
        if self.ris_hop_model not in ("log_distance", "three_slope"):
            raise ChannelInputError(f"unknown ris_hop_model {self.ris_hop_model!r}")

    @classmethod
    def three_slope(cls, **overrides) -> "SystemConfig":
        """Every link three-slope, raw element area, unobstructed direct links."""
        overrides.setdefault("direct_blockage_db", 0.0)
        return cls(ris_hop_model="three_slope", **overrides)

    @property
    def tau_d(self) -> int:
        return self.tau_c - self.tau_p

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def ris_element_spacing_m(self) -> float:
        return self.ris_spacing_fraction * self.wavelength_m

    @property
    def element_area_m2(self) -> float:
        return self.ris_element_spacing_m ** 2

    @property
    def element_gain(self) -> float:
        """Factor folded into beta_mr and beta_rk.

        The raw area A for the three-slope model; for the log-distance model
        the area relative to the effective aperture of an isotropic antenna,
        since that path loss already refers to isotropic elements.
        """
        if self.ris_hop_model == "three_slope":
            return self.element_area_m2
        return self.element_area_m2 / (self.wavelength_m ** 2 / (4.0 * math.pi))

    @property
    def ris_position(self) -> np.ndarray:
        return np.array([self.area_side_m / 2.0, 0.0, self.ris_height_m])


@dataclass
class ChannelState:
    """Large-scale picture of one drop: the diffusion condition plus R.

    ``beta_mr`` and ``beta_rk`` already include the element gain and the SNR
    normalization, so ``R_mr = beta_mr * R`` and ``R_rk = beta_rk * R``.
    """

    beta_mr: np.ndarray
    beta_rk: np.ndarray
    beta_mk: np.ndarray
    R: np.ndarray
    positions: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.beta_mk.shape[0]

    @property
    def K(self) -> int:
        return self.beta_mk.shape[1]

    @property
    def N(self) -> int:
        return self.R.shape[0]

    def condition_db(self) -> np.ndarray:
        """Flattened ``[beta_mr, beta_rk, beta_mk]`` in dB (length M + K + M*K)."""
        flat = np.concatenate([self.beta_mr, self.beta_rk, self.beta_mk.ravel()])
        return 10.0 * np.log10(flat)


@dataclass
class ChannelRealization:
    g: np.ndarray  # (M, N): row m is g_mr^T
    h: np.ndarray  # (K, N): row k is h_rk^T
    l: np.ndarray  # (M, K)


@dataclass
class PhaseVector:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.mod(np.asarray(self.theta, dtype=float), 2.0 * np.pi)

    @property
    def normalized(self) -> np.ndarray:
        return (self.theta - np.pi) / np.pi

    @classmethod
    def from_normalized(cls, x) -> "PhaseVector":
        return cls(np.mod((np.asarray(x, dtype=float) + 1.0) * np.pi, 2.0 * np.pi))


def pathloss_three_slope(d_km, L: float = 140.7, d0_km: float = 0.01, d1_km: float = 0.05):
    """Three-slope path loss in dB (negative numbers) for distance(s) in km."""
    d = np.asarray(d_km, dtype=float)
    if np.any(~(d > 0)):
        raise ChannelInputError("distance must be positive")
    far = -L - 35.0 * np.log10(d)
    mid = -L - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d)
    near = -L - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d0_km)
    out = np.where(d > d1_km, far, np.where(d > d0_km, mid, near))
    return float(out) if out.ndim == 0 else out


def pathloss_log_distance(d_m, ref_loss_db: float = 30.0, exponent: float = 2.2):
    """Log-distance path loss in dB referenced at 1 m; used for the RIS hops."""
    d = np.asarray(d_m, dtype=float)
    if np.any(~(d > 0)):
        raise ChannelInputError("distance must be positive")
    out = -ref_loss_db - 10.0 * exponent * np.log10(np.maximum(d, 1.0))
    return float(out) if out.ndim == 0 else out


def build_ris_correlation(N: int, spacing: float, wavelength: float, grid=None) -> np.ndarray:
    """Sinc spatial correlation of a planar RIS.

    Elements sit on a ``sqrt(N) x sqrt(N)`` grid unless ``grid=(rows, cols)``
    is given (used for toy instances whose N is not a square).
    """
    if spacing <= 0 or wavelength <= 0:
        raise ChannelInputError("spacing and wavelength must be positive")
    if grid is None:
        side = math.isqrt(N)
        if side * side != N:
            raise ChannelInputError(f"N={N} is not a perfect square")
        grid = (side, side)
    rows, cols = grid
    if rows * cols != N:
        raise ChannelInputError(f"grid {grid} does not hold {N} elements")
    idx = np.arange(N)
    xy = np.stack([idx % cols, idx // cols], axis=1) * spacing
    dist = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    # np.sinc is sin(pi x)/(pi x)
    return np.sinc(2.0 * dist / wavelength)


def _uniform_positions(rng, count, side, height):
    xy = rng.uniform(0.0, side, size=(count, 2))
    return np.column_stack([xy, np.full(count, height)])


def draw_drop(config: SystemConfig, rng: np.random.Generator, R: np.ndarray | None = None) -> ChannelState:
    """Random AP/user placement and the resulting large-scale coefficients."""
    ris = config.ris_position
    floor = config.min_distance_m

    aps = _uniform_positions(rng, config.M, config.area_side_m, config.ap_height_m)
    for m in range(config.M):
        while np.linalg.norm(aps[m, :2] - ris[:2]) < floor:
            aps[m] = _uniform_positions(rng, 1, config.area_side_m, config.ap_height_m)[0]

    users = _uniform_positions(rng, config.K, config.area_side_m, config.user_height_m)
    for k in range(config.K):
        while np.min(np.linalg.norm(aps[:, :2] - users[k, :2], axis=1)) < floor:
            users[k] = _uniform_positions(rng, 1, config.area_side_m, config.user_height_m)[0]

    d_mk = np.linalg.norm(aps[:, None, :] - users[None, :, :], axis=-1)
    d_mr = np.linalg.norm(aps - ris, axis=-1)
    d_rk = np.linalg.norm(users - ris, axis=-1)

    pl_mk = pathloss_three_slope(d_mk / 1000.0) - config.direct_blockage_db
    if config.ris_hop_model == "three_slope":
        pl_mr = pathloss_three_slope(d_mr / 1000.0)
        pl_rk = pathloss_three_slope(d_rk / 1000.0)
    else:
        pl_mr = pathloss_log_distance(d_mr, config.ris_ref_loss_db, config.ris_pathloss_exponent)
        pl_rk = pathloss_log_distance(d_rk, config.ris_ref_loss_db, config.ris_pathloss_exponent)
    if config.shadow_fading:
        pl_mk = pl_mk + config.shadow_sigma_db * rng.standard_normal(pl_mk.shape)
        pl_mr = pl_mr + config.shadow_sigma_db * rng.standard_normal(pl_mr.shape)
        pl_rk = pl_rk + config.shadow_sigma_db * rng.standard_normal(pl_rk.shape)

    ref = config.snr_reference_db
    beta_mk = 10.0 ** ((pl_mk - ref) / 10.0)
    beta_mr = 10.0 ** ((pl_mr - ref) / 10.0) * config.element_gain
    beta_rk = 10.0 ** (pl_rk / 10.0) * config.element_gain

    if R is None:
        R = build_ris_correlation(config.N, config.ris_element_spacing_m, config.wavelength_m, grid=config.ris_grid)
    return ChannelState(
        beta_mr=beta_mr,
        beta_rk=beta_rk,
        beta_mk=beta_mk,
        R=R,
        positions={"ap": aps, "user": users, "ris": ris},
    )


def sqrt_psd(A: np.ndarray) -> np.ndarray:
    """Hermitian square root through eigendecomposition, negative eigenvalues clamped."""
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("eigendecomposition failed") from exc
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.conj().T


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def draw_small_scale(state: ChannelState, rng: np.random.Generator, count: int | None = None) -> ChannelRealization:
    """One (or ``count`` stacked) small-scale draw(s) of g, h and l.

    With ``count`` the arrays gain a leading axis of that length.
    """
    lead = () if count is None else (count,)
    R_half = sqrt_psd(state.R)
    M, K, N = state.M, state.K, state.N
    # z @ R_half.T gives rows R^{1/2} z
    g = complex_gaussian(rng, lead + (M, N)) @ R_half.T * np.sqrt(state.beta_mr)[:, None]
    h = complex_gaussian(rng, lead + (K, N)) @ R_half.T * np.sqrt(state.beta_rk)[:, None]
    l = complex_gaussian(rng, lead + (M, K)) * np.sqrt(state.beta_mk)
    return ChannelRealization(g=g, h=h, l=l)


def aggregate_channel(realization: ChannelRealization, theta) -> np.ndarray:
    """``u_mk = l_mk + h_rk^H diag(e^{j theta}) g_mr``; broadcasts over a leading draw axis."""
    phase = np.exp(1j * np.asarray(theta, dtype=float))
    g, h = realization.g, realization.h
    cascade = np.einsum("...kn,...mn->...mk", h.conj() * phase, g)
    return realization.l + cascade


def cascaded_second_moment(R_mr: np.ndarray, R_rk: np.ndarray, theta) -> float:
    """``Tr(Theta R_mr Theta^H R_rk)`` evaluated as ``z^T (R_mr * R_rk^T) z^*``."""
    if R_mr.shape != R_rk.shape or R_mr.shape[0] != R_mr.shape[1]:
        raise ChannelInputError(f"shape mismatch: {R_mr.shape} vs {R_rk.shape}")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (R_mr.shape[0],):
        raise ChannelInputError(f"theta has shape {theta.shape}, expected ({R_mr.shape[0]},)")
    z = np.exp(1j * theta)
    value = z @ (R_mr * R_rk.T) @ z.conj()
    return float(value.real)


def cascade_gain(R: np.ndarray, theta) -> np.ndarray:
    """``Tr(Theta R Theta^H R)`` for the shared correlation, vectorized over leading axes of theta."""
    theta = np.asarray(theta, dtype=float)
    z = np.exp(1j * theta)
    RR = R * R.T
    return np.einsum("...n,nj,...j->...", z, RR, z.conj()).real
