"""Hot convolution/pooling kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same signature. The numba path is used when numba imports cleanly
and ``CZSL_DISABLE_NUMBA`` is unset (or ``0``); :func:`use_numba` flips the
choice at runtime, which the tests and ``benchmarks/bench_kernels.py`` use
to compare both paths.

Layouts: images are ``[B, C, H, W]``; im2col columns are
``[B * H_out * W_out, C * k * k]`` with the channel index slowest, matching
a weight matrix reshaped from ``[C_out, C, k, k]`` to ``[C_out, C*k*k]``.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_ENABLED = HAVE_NUMBA and os.environ.get("CZSL_DISABLE_NUMBA", "0") in ("", "0")


def use_numba(flag: bool | None = None) -> bool:
    """Return whether numba kernels are active; optionally set it first."""
    global _ENABLED
    if flag is not None:
        if flag and not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _ENABLED = bool(flag)
    return _ENABLED


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _im2col_np(x, k, pad):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: [B, C, Ho, Wo, k, k] -> [B, Ho, Wo, C, k, k]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)


def _col2im_np(cols, shape, k, pad):
    B, C, H, W = shape
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    c6 = cols.reshape(B, Ho, Wo, C, k, k)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + Ho, dj:dj + Wo] += c6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + H, pad:pad + W].copy()


def _maxpool_np(x):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    blocks = x[:, :, :Ho * 2, :Wo * 2].reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, Ho, Wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_bwd_np(g, arg, shape):
    B, C, H, W = shape
    Ho, Wo = g.shape[2], g.shape[3]
    blocks = np.zeros((B, C, Ho, Wo, 4))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * 2, Wo * 2)
    out = np.zeros(shape)
    out[:, :, :Ho * 2, :Wo * 2] = blocks
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col_nb(x, k, pad):
        B, C, H, W = x.shape
        Ho = H + 2 * pad - k + 1
        Wo = W + 2 * pad - k + 1
        cols = np.zeros((B * Ho * Wo, C * k * k))
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    for c in range(C):
                        for di in range(k):
                            ii = i + di - pad
                            if ii < 0 or ii >= H:
                                continue
                            for dj in range(k):
                                jj = j + dj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                cols[row, (c * k + di) * k + dj] = x[b, c, ii, jj]
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, B, C, H, W, k, pad):
        Ho = H + 2 * pad - k + 1
        Wo = W + 2 * pad - k + 1
        out = np.zeros((B, C, H, W))
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    for c in range(C):
                        for di in range(k):
                            ii = i + di - pad
                            if ii < 0 or ii >= H:
                                continue
                            for dj in range(k):
                                jj = j + dj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                out[b, c, ii, jj] += cols[row, (c * k + di) * k + dj]
        return out

    @njit(cache=True, nogil=True)
    def _maxpool_nb(x):
        B, C, H, W = x.shape
        Ho = H // 2
        Wo = W // 2
        out = np.empty((B, C, Ho, Wo))
        arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[b, c, 2 * i, 2 * j]
                        bi = 0
                        for t in range(1, 4):
                            v = x[b, c, 2 * i + t // 2, 2 * j + t % 2]
                            if v > best:
                                best = v
                                bi = t
                        out[b, c, i, j] = best
                        arg[b, c, i, j] = bi
        return out, arg

    @njit(cache=True, nogil=True)
    def _maxpool_bwd_nb(g, arg, B, C, H, W):
        out = np.zeros((B, C, H, W))
        Ho = g.shape[2]
        Wo = g.shape[3]
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        t = arg[b, c, i, j]
                        out[b, c, 2 * i + t // 2, 2 * j + t % 2] += g[b, c, i, j]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _ENABLED:
        return _im2col_nb(x, k, pad)
    return _im2col_np(x, k, pad)


def col2im(cols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if _ENABLED:
        B, C, H, W = shape
        return _col2im_nb(cols, B, C, H, W, k, pad)
    return _col2im_np(cols, shape, k, pad)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling; returns (output, flat argmax within each window)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _ENABLED:
        return _maxpool_nb(x)
    return _maxpool_np(x)


def maxpool2x2_backward(g: np.ndarray, arg: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _ENABLED:
        B, C, H, W = shape
        return _maxpool_bwd_nb(g, np.ascontiguousarray(arg), B, C, H, W)
    return _maxpool_bwd_np(g, arg, shape)
