"""Hot numeric kernels: row softmax, layer norm and GELU, forward and backward.

Each kernel exists twice: a pure-numpy version and a numba ``@njit`` version
with identical semantics. The active set is chosen once at import time from
the ``FUSETTA_BACKEND`` environment variable (``numba`` or ``numpy``); the
default is numba when it imports, numpy otherwise. ``benchmarks/bench_kernels.py``
compares the two on representative shapes.

All kernels take and return C-contiguous float64 arrays.
"""
import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAS_NUMBA = False

# GELU tanh approximation constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def softmax_rows_np(x, inv_scale):
    z = x * inv_scale
    z = z - z.max(axis=1, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_rows_bwd_np(y, gy, inv_scale):
    # dL/dx = inv_scale * y * (gy - sum_j gy_j y_j) per row
    dot = (gy * y).sum(axis=1, keepdims=True)
    return inv_scale * y * (gy - dot)


def layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = gamma * xhat + beta
    return y, xhat, inv_std[:, 0].copy()


def layer_norm_bwd_np(gy, xhat, inv_std, gamma):
    n = xhat.shape[1]
    gg = gy * gamma
    m1 = gg.sum(axis=1, keepdims=True) / n
    m2 = (gg * xhat).sum(axis=1, keepdims=True) / n
    gx = inv_std[:, None] * (gg - m1 - xhat * m2)
    ggamma = (gy * xhat).sum(axis=0, keepdims=True)
    gbeta = gy.sum(axis=0, keepdims=True)
    return gx, ggamma, gbeta


def gelu_fwd_np(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd_np(x, gy):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)


# ---------------------------------------------------------------------------
# numba implementations (same math, explicit loops)
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def softmax_rows_nb(x, inv_scale):
        r, c = x.shape
        y = np.empty((r, c))
        for i in range(r):
            m = x[i, 0] * inv_scale
            for j in range(1, c):
                v = x[i, j] * inv_scale
                if v > m:
                    m = v
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] * inv_scale - m)
                y[i, j] = e
                s += e
            for j in range(c):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def softmax_rows_bwd_nb(y, gy, inv_scale):
        r, c = y.shape
        gx = np.empty((r, c))
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += gy[i, j] * y[i, j]
            for j in range(c):
                gx[i, j] = inv_scale * y[i, j] * (gy[i, j] - dot)
        return gx

    @njit(cache=True)
    def layer_norm_fwd_nb(x, gamma, beta, eps):
        r, c = x.shape
        y = np.empty((r, c))
        xhat = np.empty((r, c))
        inv_std = np.empty(r)
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            istd = 1.0 / math.sqrt(var + eps)
            inv_std[i] = istd
            for j in range(c):
                h = (x[i, j] - mu) * istd
                xhat[i, j] = h
                y[i, j] = gamma[0, j] * h + beta[0, j]
        return y, xhat, inv_std

    @njit(cache=True)
    def layer_norm_bwd_nb(gy, xhat, inv_std, gamma):
        r, c = xhat.shape
        gx = np.empty((r, c))
        ggamma = np.zeros((1, c))
        gbeta = np.zeros((1, c))
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                gg = gy[i, j] * gamma[0, j]
                m1 += gg
                m2 += gg * xhat[i, j]
            m1 /= c
            m2 /= c
            for j in range(c):
                gg = gy[i, j] * gamma[0, j]
                gx[i, j] = inv_std[i] * (gg - m1 - xhat[i, j] * m2)
                ggamma[0, j] += gy[i, j] * xhat[i, j]
                gbeta[0, j] += gy[i, j]
        return gx, ggamma, gbeta

    @njit(cache=True)
    def gelu_fwd_nb(x):
        r, c = x.shape
        y = np.empty((r, c))
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                u = _GELU_C * (v + _GELU_A * v * v * v)
                y[i, j] = 0.5 * v * (1.0 + math.tanh(u))
        return y

    @njit(cache=True)
    def gelu_bwd_nb(x, gy):
        r, c = x.shape
        gx = np.empty((r, c))
        for i in range(r):
            for j in range(c):
                v = x[i, j]
                u = _GELU_C * (v + _GELU_A * v * v * v)
                t = math.tanh(u)
                du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
                gx[i, j] = gy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return gx

else:  # pragma: no cover
    softmax_rows_nb = None
    softmax_rows_bwd_nb = None
    layer_norm_fwd_nb = None
    layer_norm_bwd_nb = None
    gelu_fwd_nb = None
    gelu_bwd_nb = None


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

def _pick_backend() -> str:
    choice = os.environ.get("FUSETTA_BACKEND", "").strip().lower()
    if choice == "":
        return "numba" if HAS_NUMBA else "numpy"
    if choice not in ("numba", "numpy"):
        raise ValueError(
            f"FUSETTA_BACKEND must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numba" and not HAS_NUMBA:
        raise ValueError("FUSETTA_BACKEND=numba but numba is not importable")
    return choice


BACKEND = _pick_backend()

if BACKEND == "numba":
    softmax_rows = softmax_rows_nb
    softmax_rows_bwd = softmax_rows_bwd_nb
    layer_norm_fwd = layer_norm_fwd_nb
    layer_norm_bwd = layer_norm_bwd_nb
    gelu_fwd = gelu_fwd_nb
    gelu_bwd = gelu_bwd_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_bwd = softmax_rows_bwd_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np


def active_backend() -> str:
    return BACKEND


def warmup():
    """Force JIT compilation of the numba kernels (no-op on numpy backend)."""
    if BACKEND != "numba":
        return
    x = np.ones((2, 3))
    g = np.ones((1, 3))
    y = softmax_rows(x, 1.0)
    softmax_rows_bwd(y, x, 1.0)
    out, xhat, istd = layer_norm_fwd(x, g, g, 1e-5)
    layer_norm_bwd(x, xhat, istd, g)
    gelu_bwd(x, gelu_fwd(x))
