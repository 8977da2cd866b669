"""Compiled single-sample inference loop for the samplers.

Both samplers reduce to the same recursion once the per-step embeddings,
coefficients and noise are fixed up front::

    x <- (x - b[i] * eps_hat(x, emb[i])) * a[i] + s[i] * z[i]

so one jitted loop serves both. The network arithmetic mirrors
``denoiser.backbone`` for a batch of one.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .denoiser import LN_EPS, WIDTH, DenoiserParams


@njit(cache=True, fastmath=True)
def _silu(z):
    return z / (1.0 + np.exp(-z))

@njit(cache=True, fastmath=True)
def _mm(a, w, out):
    """out = a @ w with the inner loop over the contiguous output axis."""
    L, C = a.shape
    O = w.shape[1]
    for j in range(L):
        for o in range(O):
            out[j, o] = 0.0
        for c in range(C):
            av = a[j, c]
            for o in range(O):
                out[j, o] += av * w[c, o]

@njit(cache=True, fastmath=True)
def _conv(x, w, b, stride, L_out):
    """Kernel-3, pad-1 convolution of (L, C) into (L_out, O)."""
    L, C = x.shape
    O = w.shape[2]
    y = np.empty((L_out, O))
    for j in range(L_out):
        for o in range(O):
            y[j, o] = b[o]
        for k in range(3):
            src = j * stride + k - 1
            if src < 0 or src >= L:
                continue
            for c in range(C):
                xv = x[src, c]
                for o in range(O):
                    y[j, o] += xv * w[k, c, o]
    return y

@njit(cache=True, fastmath=True)
def _predict(x, emb, down_w, down_b, ln_g, ln_b, wq, wk, wv, wo, ob, up_w, up_b, out_w, out_b):
    N = x.shape[0]
    H = N // 2
    e = _conv(x.reshape(N, 1), down_w, down_b, 2, H)
    for j in range(H):
        for c in range(WIDTH):
            e[j, c] = _silu(e[j, c]) + emb[c]
    a = np.empty((H, WIDTH))
    for j in range(H):
        mu = 0.0
        for c in range(WIDTH):
            mu += e[j, c]
        mu /= WIDTH
        var = 0.0
        for c in range(WIDTH):
            d = e[j, c] - mu
            var += d * d
        inv = 1.0 / np.sqrt(var / WIDTH + LN_EPS)
        for c in range(WIDTH):
            a[j, c] = (e[j, c] - mu) * inv * ln_g[c] + ln_b[c]
    q = np.empty((H, WIDTH))
    k = np.empty((H, WIDTH))
    v = np.empty((H, WIDTH))
    _mm(a, wq, q)
    _mm(a, wk, k)
    _mm(a, wv, v)
    P = np.empty((H, H))
    scale = 1.0 / np.sqrt(WIDTH)
    for j in range(H):
        m = -np.inf
        for i in range(H):
            sc = 0.0
            for c in range(WIDTH):
                sc += q[j, c] * k[i, c]
            P[j, i] = sc * scale
            if P[j, i] > m:
                m = P[j, i]
        total = 0.0
        for i in range(H):
            P[j, i] = np.exp(P[j, i] - m)
            total += P[j, i]
        for i in range(H):
            P[j, i] /= total
    o = np.empty((H, WIDTH))
    _mm(P, v, o)
    h = np.empty((H, WIDTH))
    _mm(o, wo, h)
    # residual and nearest-neighbour upsampling in one pass
    up = np.empty((N, WIDTH))
    for j in range(N):
        for c in range(WIDTH):
            up[j, c] = h[j // 2, c] + ob[c] + e[j // 2, c]
    d = _conv(up, up_w, up_b, 1, N)
    for j in range(N):
        for c in range(WIDTH):
            d[j, c] = _silu(d[j, c])
    y = _conv(d, out_w, out_b, 1, N)
    return y[:, 0]


@njit(cache=True)
def _run(x, embs, a, b, s, z, down_w, down_b, ln_g, ln_b, wq, wk, wv, wo, ob, up_w, up_b, out_w, out_b):
    for i in range(embs.shape[0]):
        eps = _predict(x, embs[i], down_w, down_b, ln_g, ln_b, wq, wk, wv, wo, ob, up_w, up_b, out_w, out_b)
        x = (x - b[i] * eps) * a[i] + s[i] * z[i]
    return x


def run_chain(params: DenoiserParams, x, embs, a, b, s, z) -> np.ndarray:
    """Apply the recursion for ``len(embs)`` steps; every argument is per step."""
    W = params.weights
    f = np.ascontiguousarray
    return _run(f(x, dtype=np.float64), f(embs), f(a), f(b), f(s), f(z),
                f(W["down_w"]), f(W["down_b"]), f(W["ln_g"]), f(W["ln_b"]),
                f(W["attn_q"]), f(W["attn_k"]), f(W["attn_v"]), f(W["attn_o"]), f(W["attn_ob"]),
                f(W["up_w"]), f(W["up_b"]), f(W["out_w"]), f(W["out_b"]))


def predict_one(params: DenoiserParams, x, emb) -> np.ndarray:
    """Single noise prediction through the compiled network (for cross-checks)."""
    N = len(x)
    return run_chain(params, x, np.asarray(emb, dtype=np.float64)[None], np.ones(1), np.full(1, -1.0),
                     np.zeros(1), np.zeros((1, N))) - np.asarray(x)
