"""Hot inner loops: stopband mask, im2col/col2im and max pooling.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. The active path is chosen by the ``BUDGETPRUNE_BACKEND``
environment variable (``numba`` or ``numpy``) at import time and can be
switched later with :func:`set_backend`. If numba is not importable the numpy
path is used regardless.

Both paths are deterministic for a fixed input; they are not guaranteed to be
bitwise identical to each other (``exp`` may differ in the last ulp).
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


C2 = math.exp(-1.0)
C1 = 1.0 / (1.0 - C2)
# beyond this (t*x)^n the exp argument rounds to -0 in float64
SATURATION = 1e15

_BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get("BUDGETPRUNE_BACKEND", "numba").strip().lower()
    if requested not in _BACKENDS:
        raise ValueError(
            f"BUDGETPRUNE_BACKEND must be one of {_BACKENDS}, got {requested!r}"
        )
    if requested == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return requested


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _backend = name


# --------------------------------------------------------------------------
# stopband mask h_t(x) = C1 * (exp(-1 / ((t x)^n + 1)) - C2)
# --------------------------------------------------------------------------


@njit(cache=True)
def _stopband_nb(x, t, n, need_grad):
    size = x.size
    h = np.empty(size, dtype=np.float64)
    dx = np.empty(size, dtype=np.float64)
    dlogt = np.empty(size, dtype=np.float64)
    half = n // 2
    for i in range(size):
        tx = t * x[i]
        sq = tx * tx
        p = 1.0
        for _ in range(half):
            p *= sq
        if p > SATURATION:
            h[i] = 1.0
            dx[i] = 0.0
            dlogt[i] = 0.0
            continue
        q = p + 1.0
        e = math.exp(-1.0 / q)
        v = C1 * (e - C2)
        if v > 1.0:
            v = 1.0
        elif v < 0.0:
            v = 0.0
        h[i] = v
        if need_grad:
            # n t (tx)^(n-1) without dividing by x
            pm1 = 1.0
            for _ in range(half - 1):
                pm1 *= sq
            common = C1 * e * n / (q * q)
            dx[i] = common * t * tx * pm1
            dlogt[i] = common * p
    return h, dx, dlogt


def _stopband_np(x, t, n, need_grad):
    with np.errstate(over="ignore", invalid="ignore"):
        tx = t * x
        sq = tx * tx
        p = sq ** (n // 2)
        sat = p > SATURATION
        q = np.where(sat, 1.0, p + 1.0)
        e = np.exp(-1.0 / q)
        h = np.clip(C1 * (e - C2), 0.0, 1.0)
        h[sat] = 1.0
        if not need_grad:
            return h, None, None
        pm1 = sq ** (n // 2 - 1)
        common = C1 * e * n / (q * q)
        dx = common * t * tx * pm1
        dlogt = common * p
        dx[sat] = 0.0
        dlogt[sat] = 0.0
    return h, dx, dlogt


def stopband(x: np.ndarray, t: float, n: int, need_grad: bool = False):
    """Evaluate the stabilized stopband mask elementwise.

    Returns ``(h, dh/dx, dh/dlog t)`` arrays shaped like ``x``; the two
    derivative arrays are ``None`` when ``need_grad`` is false. ``dh/dlog t``
    equals ``t * dh/dt``.
    """
    shape = np.shape(x)
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if _backend == "numba":
        h, dx, dlogt = _stopband_nb(flat, float(t), int(n), need_grad)
        if not need_grad:
            dx = dlogt = None
    else:
        h, dx, dlogt = _stopband_np(flat, float(t), int(n), need_grad)
    h = h.reshape(shape)
    if dx is not None:
        dx = dx.reshape(shape)
        dlogt = dlogt.reshape(shape)
    return h, dx, dlogt


# --------------------------------------------------------------------------
# im2col / col2im, channel-major layout (C, kh, kw, N, OH, OW) -> (C*kh*kw, N*OH*OW)
# --------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@njit(cache=True)
def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
    N, C, H, W = x.shape
    cols = np.zeros((C * kh * kw, N * oh * ow), dtype=x.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                for b in range(N):
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= H:
                            continue
                        base = (b * oh + oy) * ow
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if 0 <= xx < W:
                                cols[r, base + ox] = x[b, c, y, xx]
    return cols


@njit(cache=True)
def _col2im_nb(cols, N, C, H, W, kh, kw, stride, pad, oh, ow):
    dx = np.zeros((N, C, H, W), dtype=cols.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                for b in range(N):
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= H:
                            continue
                        base = (b * oh + oy) * ow
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if 0 <= xx < W:
                                dx[b, c, y, xx] += cols[r, base + ox]
    return dx


def _im2col_np(x, kh, kw, stride, pad, oh, ow):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, oh, ow), dtype=x.dtype)
    for i in range(kh):
        ys = slice(i, i + stride * (oh - 1) + 1, stride)
        for j in range(kw):
            xs = slice(j, j + stride * (ow - 1) + 1, stride)
            cols[:, i, j] = xt[:, :, ys, xs]
    return cols.reshape(C * kh * kw, N * oh * ow)


def _col2im_np(cols, N, C, H, W, kh, kw, stride, pad, oh, ow):
    c6 = cols.reshape(C, kh, kw, N, oh, ow)
    dxp = np.zeros((C, N, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        ys = slice(i, i + stride * (oh - 1) + 1, stride)
        for j in range(kw):
            xs = slice(j, j + stride * (ow - 1) + 1, stride)
            dxp[:, :, ys, xs] += c6[:, i, j]
    dx = dxp.transpose(1, 0, 2, 3)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into a (C*kh*kw, N*OH*OW) patch matrix."""
    N, C, H, W = x.shape
    oh = conv_output_size(H, kh, stride, pad)
    ow = conv_output_size(W, kw, stride, pad)
    if _backend == "numba":
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)
    return _im2col_np(x, kh, kw, stride, pad, oh, ow)


def col2im(cols, x_shape, kh, kw, stride, pad) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    N, C, H, W = x_shape
    oh = conv_output_size(H, kh, stride, pad)
    ow = conv_output_size(W, kw, stride, pad)
    if _backend == "numba":
        return _col2im_nb(
            np.ascontiguousarray(cols), N, C, H, W, kh, kw, stride, pad, oh, ow
        )
    return _col2im_np(cols, N, C, H, W, kh, kw, stride, pad, oh, ow)


# --------------------------------------------------------------------------
# non-overlapping max pooling; ties go to the first row-major maximum
# --------------------------------------------------------------------------


@njit(cache=True)
def _maxpool_nb(x, k):
    N, C, H, W = x.shape
    oh = H // k
    ow = W // k
    out = np.empty((N, C, oh, ow), dtype=x.dtype)
    arg = np.empty((N, C, oh, ow), dtype=np.int64)
    for b in range(N):
        for c in range(C):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[b, c, oy * k, ox * k]
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, c, oy * k + i, ox * k + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, c, oy, ox] = best
                    arg[b, c, oy, ox] = bi
    return out, arg


@njit(cache=True)
def _maxpool_back_nb(g, arg, k, H, W):
    N, C, oh, ow = g.shape
    dx = np.zeros((N, C, H, W), dtype=g.dtype)
    for b in range(N):
        for c in range(C):
            for oy in range(oh):
                for ox in range(ow):
                    bi = arg[b, c, oy, ox]
                    dx[b, c, oy * k + bi // k, ox * k + bi % k] = g[b, c, oy, ox]
    return dx


def _windows(x, k):
    N, C, H, W = x.shape
    oh, ow = H // k, W // k
    v = x[:, :, : oh * k, : ow * k].reshape(N, C, oh, k, ow, k)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, oh, ow, k * k)


def _maxpool_np(x, k):
    win = _windows(x, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_back_np(g, arg, k, H, W):
    N, C, oh, ow = g.shape
    onehot = np.zeros((N, C, oh, ow, k * k), dtype=g.dtype)
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    blocks = onehot.reshape(N, C, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((N, C, H, W), dtype=g.dtype)
    dx[:, :, : oh * k, : ow * k] = blocks.reshape(N, C, oh * k, ow * k)
    return dx


def maxpool(x: np.ndarray, k: int):
    if _backend == "numba":
        return _maxpool_nb(np.ascontiguousarray(x), k)
    return _maxpool_np(x, k)


def maxpool_backward(g: np.ndarray, arg: np.ndarray, k: int, H: int, W: int):
    if _backend == "numba":
        return _maxpool_back_nb(np.ascontiguousarray(g), arg, k, H, W)
    return _maxpool_back_np(g, arg, k, H, W)
