"""Noise-prediction network: a one-level 1-D UNet with a self-attention block.

Pure numpy with a hand-written backward pass. Layout of a forward call::

    cond  -> affine(dim_c, 64) -> SiLU -> affine(64, 32) --+
    t     -> sinusoidal(32)    -> affine(32, 32) ---------+--> emb (B, 32)
    theta (B, N, 1) -> conv3 stride 2 (1->32) -> SiLU -> + emb   (B, N/2, 32)
                    -> x + attn(layernorm(x))                    (B, N/2, 32)
                    -> nearest x2 -> conv3 (32->32) -> SiLU      (B, N, 32)
                    -> conv3 (32->1)                             (B, N)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

WIDTH = 32
COND_HIDDEN = 64
TIME_DIM = 32
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"RDNW1"

# name -> shape factory; order fixes the flat checkpoint layout
PARAM_SHAPES = {
    "cond_w1": lambda n, c: (c, COND_HIDDEN),
    "cond_b1": lambda n, c: (COND_HIDDEN,),
    "cond_w2": lambda n, c: (COND_HIDDEN, WIDTH),
    "cond_b2": lambda n, c: (WIDTH,),
    "time_w": lambda n, c: (TIME_DIM, WIDTH),
    "time_b": lambda n, c: (WIDTH,),
    "down_w": lambda n, c: (3, 1, WIDTH),
    "down_b": lambda n, c: (WIDTH,),
    "ln_g": lambda n, c: (WIDTH,),
    "ln_b": lambda n, c: (WIDTH,),
    "attn_q": lambda n, c: (WIDTH, WIDTH),
    "attn_k": lambda n, c: (WIDTH, WIDTH),
    "attn_v": lambda n, c: (WIDTH, WIDTH),
    "attn_o": lambda n, c: (WIDTH, WIDTH),
    "attn_ob": lambda n, c: (WIDTH,),
    "up_w": lambda n, c: (3, WIDTH, WIDTH),
    "up_b": lambda n, c: (WIDTH,),
    "out_w": lambda n, c: (3, WIDTH, 1),
    "out_b": lambda n, c: (1,),
}

_BIAS_OWNER = {"cond_b1": "cond_w1", "cond_b2": "cond_w2", "time_b": "time_w", "down_b": "down_w",
               "attn_ob": "attn_o", "up_b": "up_w"}


class ShapeError(ValueError):
    pass


@dataclass
class DenoiserParams:
    N: int
    dim_c: int
    weights: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in PARAM_SHAPES])

    def count(self) -> int:
        return sum(int(np.prod(f(self.N, self.dim_c))) for f in PARAM_SHAPES.values())

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.N, self.dim_c, {k: v.copy() for k, v in self.weights.items()})

    @classmethod
    def from_flat(cls, N, dim_c, flat) -> "DenoiserParams":
        weights, pos = {}, 0
        for name, shape_fn in PARAM_SHAPES.items():
            shape = shape_fn(N, dim_c)
            size = int(np.prod(shape))
            weights[name] = np.array(flat[pos:pos + size], dtype=np.float64).reshape(shape)
            pos += size
        return cls(N, dim_c, weights)


def init_params(N: int, dim_c: int, rng: np.random.Generator) -> DenoiserParams:
    """Uniform fan-in init; zero output projection; identity layer norm."""
    if N < 2 or N % 2:
        raise ShapeError(f"N={N} must be even for the stride-2 down-sampling")
    weights = {}
    for name, shape_fn in PARAM_SHAPES.items():
        shape = shape_fn(N, dim_c)
        if name.startswith("out_"):
            weights[name] = np.zeros(shape)
        elif name == "ln_g":
            weights[name] = np.ones(shape)
        elif name == "ln_b":
            weights[name] = np.zeros(shape)
        else:
            owner = _BIAS_OWNER.get(name, name)
            fan_in = int(np.prod(PARAM_SHAPES[owner](N, dim_c)[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return DenoiserParams(N, dim_c, weights)


def time_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding, interleaved as (sin, cos) pairs, highest frequency first."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv(x, w, b, stride):
    """Kernel-3, pad-1 1-D convolution on (B, L, C_in) as one im2col matmul."""
    B, L, C = x.shape
    xp = np.zeros((B, L + 2, C))
    xp[:, 1:-1] = x
    span = stride * ((L - 1) // stride) + 1
    cols = np.concatenate([xp[:, 0:span:stride], xp[:, 1:1 + span:stride], xp[:, 2:2 + span:stride]], axis=-1)
    return cols @ w.reshape(3 * C, -1) + b, cols


def _conv_backward(dy, cols, w, stride):
    _, C, O = w.shape
    B, L_out, _ = dy.shape
    dw = (cols.reshape(-1, 3 * C).T @ dy.reshape(-1, O)).reshape(w.shape)
    dcols = dy @ w.reshape(3 * C, O).T
    span = stride * (L_out - 1) + 1
    # inputs here always have length stride * L_out (N is even)
    dxp = np.zeros((B, stride * L_out + 2, C))
    for k in range(3):
        dxp[:, k:k + span:stride] += dcols[:, :, k * C:(k + 1) * C]
    return dxp[:, 1:-1], dw, dy.sum(axis=(0, 1))


def embed(params: DenoiserParams, condition, t):
    """Condition and time pathway; returns (emb, cache)."""
    W = params.weights
    z1 = condition @ W["cond_w1"] + W["cond_b1"]
    s1 = _sigmoid(z1)
    h1 = z1 * s1
    te = time_embedding(t)
    emb = h1 @ W["cond_w2"] + W["cond_b2"] + te @ W["time_w"] + W["time_b"]
    return emb, (condition, z1, s1, h1, te)


def backbone(params: DenoiserParams, theta_t, emb):
    """Sequence pathway given a precomputed embedding; returns (eps_hat, cache)."""
    W = params.weights
    B, N = theta_t.shape
    zd, xp0 = _conv(theta_t[:, :, None], W["down_w"], W["down_b"], 2)
    sd = _sigmoid(zd)
    e = zd * sd + emb[:, None, :]

    xc = e - e.sum(axis=-1, keepdims=True) * (1.0 / WIDTH)
    inv_std = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * (1.0 / WIDTH) + LN_EPS)
    nrm = xc * inv_std
    a = nrm * W["ln_g"] + W["ln_b"]

    q, k, v = a @ W["attn_q"], a @ W["attn_k"], a @ W["attn_v"]
    scores = q @ k.transpose(0, 2, 1) * (1.0 / np.sqrt(WIDTH))
    scores -= scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    o = P @ v
    h = e + o @ W["attn_o"] + W["attn_ob"]

    up = np.repeat(h, 2, axis=1)
    zu, xp1 = _conv(up, W["up_w"], W["up_b"], 1)
    su = _sigmoid(zu)
    d = zu * su
    y, xp2 = _conv(d, W["out_w"], W["out_b"], 1)
    cache = (xp0, zd, sd, inv_std, nrm, a, q, k, v, P, o, xp1, zu, su, xp2)
    return y[:, :, 0], cache


def _check_inputs(params, theta_t, condition, t):
    theta_t = np.atleast_2d(np.asarray(theta_t, dtype=np.float64))
    condition = np.atleast_2d(np.asarray(condition, dtype=np.float64))
    B = theta_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    if theta_t.shape[1] != params.N:
        raise ShapeError(f"theta has length {theta_t.shape[1]}, network expects {params.N}")
    if condition.shape[1] != params.dim_c:
        raise ShapeError(f"condition has length {condition.shape[1]}, network expects {params.dim_c}")
    if condition.shape[0] != B:
        condition = np.broadcast_to(condition, (B, params.dim_c))
    return theta_t, condition, t


def denoiser_forward(params: DenoiserParams, theta_t_norm, condition, t) -> np.ndarray:
    """Predicted noise, shape (B, N); a 1-D input gives a 1-D output."""
    single = np.ndim(theta_t_norm) == 1
    x, c, t = _check_inputs(params, theta_t_norm, condition, t)
    emb, _ = embed(params, c, t)
    out, _ = backbone(params, x, emb)
    return out[0] if single else out


def denoiser_backward(params: DenoiserParams, theta_t_norm, condition, t, eps_target):
    """Mean squared noise-prediction error over batch and positions, with exact gradients."""
    x, c, t = _check_inputs(params, theta_t_norm, condition, t)
    eps_target = np.atleast_2d(np.asarray(eps_target, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if eps_target.shape != x.shape:
        raise ShapeError(f"target shape {eps_target.shape} != input shape {x.shape}")
    W = params.weights
    B, N = x.shape

    emb, (cond, z1, s1, h1, te) = embed(params, c, t)
    out, cache = backbone(params, x, emb)
    xp0, zd, sd, inv_std, nrm, a, q, k, v, P, o, xp1, zu, su, xp2 = cache

    resid = out - eps_target
    loss = float(np.mean(resid * resid))
    grads = {}

    dy = (2.0 / (B * N)) * resid[:, :, None]
    dd, grads["out_w"], grads["out_b"] = _conv_backward(dy, xp2, W["out_w"], 1)
    dzu = dd * su * (1.0 + zu * (1.0 - su))
    dup, grads["up_w"], grads["up_b"] = _conv_backward(dzu, xp1, W["up_w"], 1)
    dh = dup[:, 0::2] + dup[:, 1::2]

    # attention residual: h = e + o Wo + bo
    de = dh.copy()
    grads["attn_o"] = np.einsum("blc,blo->co", o, dh)
    grads["attn_ob"] = dh.sum(axis=(0, 1))
    do = dh @ W["attn_o"].T
    dP = do @ v.transpose(0, 2, 1)
    dv = P.transpose(0, 2, 1) @ do
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / np.sqrt(WIDTH)
    dq = dS @ k
    dk = dS.transpose(0, 2, 1) @ q
    grads["attn_q"] = np.einsum("blc,blo->co", a, dq)
    grads["attn_k"] = np.einsum("blc,blo->co", a, dk)
    grads["attn_v"] = np.einsum("blc,blo->co", a, dv)
    da = dq @ W["attn_q"].T + dk @ W["attn_k"].T + dv @ W["attn_v"].T

    grads["ln_g"] = (da * nrm).sum(axis=(0, 1))
    grads["ln_b"] = da.sum(axis=(0, 1))
    dn = da * W["ln_g"]
    de += inv_std * (dn - dn.mean(axis=-1, keepdims=True) - nrm * (dn * nrm).mean(axis=-1, keepdims=True))

    demb = de.sum(axis=1)
    dzd = de * sd * (1.0 + zd * (1.0 - sd))
    _, grads["down_w"], grads["down_b"] = _conv_backward(dzd, xp0, W["down_w"], 2)

    grads["time_w"] = te.T @ demb
    grads["time_b"] = demb.sum(axis=0)
    grads["cond_w2"] = h1.T @ demb
    grads["cond_b2"] = demb.sum(axis=0)
    dz1 = (demb @ W["cond_w2"].T) * s1 * (1.0 + z1 * (1.0 - s1))
    grads["cond_w1"] = cond.T @ dz1
    grads["cond_b1"] = dz1.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: DenoiserParams, **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(w) for k, w in params.weights.items()},
                   v={k: np.zeros_like(w) for k, w in params.weights.items()}, **kw)


def adam_step(params: DenoiserParams, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.weights[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path, params: DenoiserParams, adam: AdamState | None = None,
                    cond_mean=None, cond_std=None) -> None:
    """Header, flat weights, Adam moments and condition normalization; all little-endian."""
    from .expert import atomic_write_bytes

    count = params.count()
    adam = adam or AdamState.zeros_like(params)
    cond_mean = np.zeros(params.dim_c) if cond_mean is None else np.asarray(cond_mean, dtype=np.float64)
    cond_std = np.ones(params.dim_c) if cond_std is None else np.asarray(cond_std, dtype=np.float64)
    header = CHECKPOINT_MAGIC + struct.pack(
        "<7Q", params.N, params.dim_c, WIDTH, COND_HIDDEN, TIME_DIM, count, adam.step
    ) + struct.pack("<3d", adam.beta1, adam.beta2, adam.eps)
    m_flat = np.concatenate([adam.m[k].ravel() for k in PARAM_SHAPES])
    v_flat = np.concatenate([adam.v[k].ravel() for k in PARAM_SHAPES])
    blob = np.concatenate([params.flat(), m_flat, v_flat, cond_mean, cond_std]).astype("<f8")
    atomic_write_bytes(path, header + blob.tobytes())


def load_checkpoint(path):
    """Returns ``(params, adam_state, cond_mean, cond_std)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    N, dim_c, width, hidden, tdim, count, step = struct.unpack_from("<7Q", blob, 5)
    if (width, hidden, tdim) != (WIDTH, COND_HIDDEN, TIME_DIM):
        raise ShapeError(f"{path}: layer widths {(width, hidden, tdim)} not supported")
    b1, b2, eps = struct.unpack_from("<3d", blob, 5 + 56)
    offset = 5 + 56 + 24
    total = 3 * count + 2 * dim_c
    flat = np.frombuffer(blob, dtype="<f8", count=total, offset=offset)
    if offset + 8 * total != len(blob):
        raise ValueError(f"{path}: size mismatch")
    params = DenoiserParams.from_flat(N, dim_c, flat[:count])
    m = DenoiserParams.from_flat(N, dim_c, flat[count:2 * count]).weights
    v = DenoiserParams.from_flat(N, dim_c, flat[2 * count:3 * count]).weights
    adam = AdamState(m=m, v=v, step=int(step), beta1=b1, beta2=b2, eps=eps)
    return params, adam, flat[3 * count:3 * count + dim_c].copy(), flat[3 * count + dim_c:].copy()
