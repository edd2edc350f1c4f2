"""Hot numeric kernels with numba-jitted and pure-numpy twins.

Every kernel exists twice: a ``_np_*`` numpy implementation and a ``_nb_*``
``@njit`` implementation. The public names are bound at import time from the
``OCCLUMOVE_NUMBA`` environment variable (``0``/``off``/``false`` selects the
numpy path; anything else, or an importable numba, selects the jitted path).
``benchmarks/bench_kernels.py`` times both paths side by side.

Matrix products deliberately stay on BLAS in both paths; hand-rolled njit
matmuls lose to it at the 1024-row sizes this package runs at.
"""
from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = os.environ.get("OCCLUMOVE_NUMBA", "1").strip().lower()
_WANT_NUMBA = _ENV_FLAG not in ("0", "off", "false", "no")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAS_NUMBA and _WANT_NUMBA

NEG_BIAS = -1e30  # additive logit mask; large enough to zero out after softmax


# ---------------------------------------------------------------------------
# softmax

def _np_softmax_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


@njit(cache=True)
def _nb_softmax_rows(x):
    n, k = x.shape
    out = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            v = np.exp(x[i, j] - m)
            out[i, j] = v
            s += v
        for j in range(k):
            out[i, j] /= s
    return out


def _np_masked_softmax_rows(logits, row_restricted, col_allowed):
    biased = logits.copy()
    rows = row_restricted.astype(bool)
    cols = ~col_allowed.astype(bool)
    biased[np.ix_(rows, cols)] += NEG_BIAS
    return _np_softmax_rows(biased)


@njit(cache=True)
def _nb_masked_softmax_rows(logits, row_restricted, col_allowed):
    n, k = logits.shape
    biased = logits.copy()
    for i in range(n):
        if row_restricted[i] != 0:
            for j in range(k):
                if col_allowed[j] == 0:
                    biased[i, j] += NEG_BIAS
    return _nb_softmax_rows(biased)


# ---------------------------------------------------------------------------
# masked compositing: out = a where m == 0, b where m == 1 (mask broadcast
# over the leading channel axis)

def _np_blend_masked(a, b, m):
    return np.where(m[None, :, :] != 0, b, a)


@njit(cache=True)
def _nb_blend_masked(a, b, m):
    c, h, w = a.shape
    out = np.empty((c, h, w), dtype=np.float64)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = b[ch, i, j] if m[i, j] != 0 else a[ch, i, j]
    return out


# ---------------------------------------------------------------------------
# bilinear resize, channels-first, half-pixel-center convention. Same-size
# calls reproduce the input exactly (source coords land on integers).

def _np_bilinear_resize(src, oh, ow):
    c, h, w = src.shape
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    tl = src[:, y0c[:, None], x0c[None, :]]
    tr = src[:, y0c[:, None], x1c[None, :]]
    bl = src[:, y1c[:, None], x0c[None, :]]
    br = src[:, y1c[:, None], x1c[None, :]]
    top = tl + (tr - tl) * fx[None, None, :]
    bot = bl + (br - bl) * fx[None, None, :]
    return top + (bot - top) * fy[None, :, None]


@njit(cache=True)
def _nb_bilinear_resize(src, oh, ow):
    c, h, w = src.shape
    out = np.empty((c, oh, ow), dtype=np.float64)
    for i in range(oh):
        y = (i + 0.5) * (h / oh) - 0.5
        y0 = int(np.floor(y))
        fy = y - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(ow):
            x = (j + 0.5) * (w / ow) - 0.5
            x0 = int(np.floor(x))
            fx = x - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for ch in range(c):
                tl = src[ch, y0c, x0c]
                tr = src[ch, y0c, x1c]
                bl = src[ch, y1c, x0c]
                br = src[ch, y1c, x1c]
                top = tl + (tr - tl) * fx
                bot = bl + (br - bl) * fx
                out[ch, i, j] = top + (bot - top) * fy
    return out


# ---------------------------------------------------------------------------
# adjoint of bilinear_resize (transpose of the interpolation operator);
# needed to backpropagate through the toy backbone's attention upsample.

def _np_bilinear_resize_adjoint(grad, h, w):
    c, oh, ow = grad.shape
    out = np.zeros((c, h, w), dtype=np.float64)
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    for i in range(oh):
        wy0 = 1.0 - fy[i]
        wy1 = fy[i]
        for j in range(ow):
            wx0 = 1.0 - fx[j]
            wx1 = fx[j]
            g = grad[:, i, j]
            out[:, y0c[i], x0c[j]] += g * (wy0 * wx0)
            out[:, y0c[i], x1c[j]] += g * (wy0 * wx1)
            out[:, y1c[i], x0c[j]] += g * (wy1 * wx0)
            out[:, y1c[i], x1c[j]] += g * (wy1 * wx1)
    return out


@njit(cache=True)
def _nb_bilinear_resize_adjoint(grad, h, w):
    c, oh, ow = grad.shape
    out = np.zeros((c, h, w), dtype=np.float64)
    for i in range(oh):
        y = (i + 0.5) * (h / oh) - 0.5
        y0 = int(np.floor(y))
        fy = y - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(ow):
            x = (j + 0.5) * (w / ow) - 0.5
            x0 = int(np.floor(x))
            fx = x - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for ch in range(c):
                g = grad[ch, i, j]
                out[ch, y0c, x0c] += g * (1.0 - fy) * (1.0 - fx)
                out[ch, y0c, x1c] += g * (1.0 - fy) * fx
                out[ch, y1c, x0c] += g * fy * (1.0 - fx)
                out[ch, y1c, x1c] += g * fy * fx
    return out


# ---------------------------------------------------------------------------
# block mean / nearest upsample (the toy codec)

# Block means are computed as rounds of 2x2 averages with a fixed grouping,
# ((a + b) + (c + d)) * 0.25, so blocks of equal values reduce exactly (the
# toy codec's round-trip contract on block-constant images).

def _np_block_mean(src, factor):
    if factor & (factor - 1):
        raise ValueError("block_mean factor must be a power of two")
    x = src
    f = factor
    while f > 1:
        x = ((x[:, 0::2, 0::2] + x[:, 0::2, 1::2])
             + (x[:, 1::2, 0::2] + x[:, 1::2, 1::2])) * 0.25
        f //= 2
    return x


@njit(cache=True)
def _nb_block_mean(src, factor):
    x = src.copy()
    f = factor
    while f > 1:
        c, h, w = x.shape
        nh = h // 2
        nw = w // 2
        nxt = np.empty((c, nh, nw), dtype=np.float64)
        for ch in range(c):
            for i in range(nh):
                for j in range(nw):
                    nxt[ch, i, j] = ((x[ch, 2 * i, 2 * j] + x[ch, 2 * i, 2 * j + 1])
                                     + (x[ch, 2 * i + 1, 2 * j] + x[ch, 2 * i + 1, 2 * j + 1])) * 0.25
        x = nxt
        f //= 2
    return x


def _np_nearest_upsample(src, factor):
    return np.repeat(np.repeat(src, factor, axis=1), factor, axis=2)


@njit(cache=True)
def _nb_nearest_upsample(src, factor):
    c, h, w = src.shape
    out = np.empty((c, h * factor, w * factor), dtype=np.float64)
    for ch in range(c):
        for i in range(h * factor):
            for j in range(w * factor):
                out[ch, i, j] = src[ch, i // factor, j // factor]
    return out


# ---------------------------------------------------------------------------
# repeated stochastic-matrix / vector product (attention refinement power)

def _np_matpow_vec(a, v, power):
    out = v.copy()
    for _ in range(power):
        out = a @ out
    return out


@njit(cache=True)
def _nb_matpow_vec(a, v, power):
    out = v.copy()
    for _ in range(power):
        out = a @ out
    return out


_NP_IMPLS = {
    "softmax_rows": _np_softmax_rows,
    "masked_softmax_rows": _np_masked_softmax_rows,
    "blend_masked": _np_blend_masked,
    "bilinear_resize": _np_bilinear_resize,
    "bilinear_resize_adjoint": _np_bilinear_resize_adjoint,
    "block_mean": _np_block_mean,
    "nearest_upsample": _np_nearest_upsample,
    "matpow_vec": _np_matpow_vec,
}

_NB_IMPLS = {
    "softmax_rows": _nb_softmax_rows,
    "masked_softmax_rows": _nb_masked_softmax_rows,
    "blend_masked": _nb_blend_masked,
    "bilinear_resize": _nb_bilinear_resize,
    "bilinear_resize_adjoint": _nb_bilinear_resize_adjoint,
    "block_mean": _nb_block_mean,
    "nearest_upsample": _nb_nearest_upsample,
    "matpow_vec": _nb_matpow_vec,
}

_ACTIVE = _NB_IMPLS if USE_NUMBA else _NP_IMPLS

softmax_rows = _ACTIVE["softmax_rows"]
masked_softmax_rows = _ACTIVE["masked_softmax_rows"]
blend_masked = _ACTIVE["blend_masked"]
bilinear_resize = _ACTIVE["bilinear_resize"]
bilinear_resize_adjoint = _ACTIVE["bilinear_resize_adjoint"]
block_mean = _ACTIVE["block_mean"]
# BLAS matmuls and np.repeat beat njit loops at these sizes (see
# benchmarks/bench_kernels.py); these two stay on numpy in both modes
nearest_upsample = _NP_IMPLS["nearest_upsample"]
matpow_vec = _NP_IMPLS["matpow_vec"]


def active_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
