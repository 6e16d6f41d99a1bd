"""Numeric kernels for layer forward/backward passes.

Two implementations exist for every hot loop: a numba ``@njit`` direct
convolution (explicit zero padding, per-element accumulation) and a pure
numpy path built from per-offset BLAS contractions.  Both accumulate in
float64 and return float32, so they agree to ~1e-7 relative.

Selection is controlled by the ``PRUNEKIT_BACKEND`` environment variable:
``auto`` (default: numba when importable), ``numba``, or ``numpy``.
``benchmarks/kernel_benchmark.py`` compares the two paths.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_ENV_FLAG = "PRUNEKIT_BACKEND"


class PerformanceWarning(UserWarning):
    pass


def _resolve_backend() -> tuple[str, bool]:
    choice = os.environ.get(_ENV_FLAG, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{_ENV_FLAG} must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy", False
    try:
        import numba  # noqa: F401

        has_numba = True
    except ImportError:
        has_numba = False
    if choice == "numba" and not has_numba:
        warnings.warn(
            "numba requested via PRUNEKIT_BACKEND but not importable; "
            "falling back to the pure numpy kernels",
            PerformanceWarning,
        )
        return "numpy", False
    return ("numba" if has_numba else "numpy"), has_numba


_BACKEND, HAS_NUMBA = _resolve_backend()

if HAS_NUMBA:
    from numba import njit
else:  # identity decorator so the direct kernels stay importable

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def active_backend() -> str:
    """Name of the kernel path in use for this process."""
    return _BACKEND


def _as_f32c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def conv2d_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


# ---------------------------------------------------------------------------
# numba direct kernels


@njit(cache=True)
def _conv2d_fwd_direct(xp, w, stride, out):
    n_b, co_n, oh_n, ow_n = out.shape
    ci_n, kh_n, kw_n = w.shape[1], w.shape[2], w.shape[3]
    for n in range(n_b):
        for co in range(co_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    acc = 0.0
                    for ci in range(ci_n):
                        for kh in range(kh_n):
                            for kw in range(kw_n):
                                acc += xp[n, ci, oh * stride + kh, ow * stride + kw] * w[co, ci, kh, kw]
                    out[n, co, oh, ow] = acc


@njit(cache=True)
def _conv2d_bwd_direct(xp, w, dout, stride, dxp, dw, db):
    n_b, co_n, oh_n, ow_n = dout.shape
    ci_n, kh_n, kw_n = w.shape[1], w.shape[2], w.shape[3]
    for n in range(n_b):
        for co in range(co_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    g = dout[n, co, oh, ow]
                    if g == 0.0:
                        continue
                    db[co] += g
                    for ci in range(ci_n):
                        for kh in range(kh_n):
                            for kw in range(kw_n):
                                ih = oh * stride + kh
                                iw = ow * stride + kw
                                dxp[n, ci, ih, iw] += g * w[co, ci, kh, kw]
                                dw[co, ci, kh, kw] += g * xp[n, ci, ih, iw]


@njit(cache=True)
def _maxpool_fwd_direct(x, k, stride, out, arg):
    n_b, c_n, oh_n, ow_n = out.shape
    for n in range(n_b):
        for c in range(c_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    best = x[n, c, oh * stride, ow * stride]
                    best_ij = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[n, c, oh * stride + i, ow * stride + j]
                            if v > best:
                                best = v
                                best_ij = i * k + j
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = best_ij


@njit(cache=True)
def _maxpool_bwd_direct(dout, arg, k, stride, dx):
    n_b, c_n, oh_n, ow_n = dout.shape
    for n in range(n_b):
        for c in range(c_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    ij = arg[n, c, oh, ow]
                    dx[n, c, oh * stride + ij // k, ow * stride + ij % k] += dout[n, c, oh, ow]


@njit(cache=True)
def _avgpool_fwd_direct(x, k, stride, out):
    n_b, c_n, oh_n, ow_n = out.shape
    inv = 1.0 / (k * k)
    for n in range(n_b):
        for c in range(c_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            acc += x[n, c, oh * stride + i, ow * stride + j]
                    out[n, c, oh, ow] = acc * inv


@njit(cache=True)
def _avgpool_bwd_direct(dout, k, stride, dx):
    n_b, c_n, oh_n, ow_n = dout.shape
    inv = 1.0 / (k * k)
    for n in range(n_b):
        for c in range(c_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    g = dout[n, c, oh, ow] * inv
                    for i in range(k):
                        for j in range(k):
                            dx[n, c, oh * stride + i, ow * stride + j] += g


# ---------------------------------------------------------------------------
# pure numpy path


def conv2d_forward_numpy(x, w, b, stride, padding):
    x = _as_f32c(x)
    n, _, h, win = x.shape
    co, ci, kh, kw = w.shape
    oh, ow = conv2d_out_hw(h, win, kh, kw, stride, padding)
    xp = _pad_nchw(x, padding).astype(np.float64)
    w64 = w.astype(np.float64)
    acc = np.zeros((n, oh, ow, co), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            # [n,ci,oh,ow] x [ci,co] -> [n,oh,ow,co]
            acc += np.tensordot(xs, w64[:, :, i, j], axes=([1], [1]))
    out = acc.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def conv2d_backward_numpy(x, w, dout, stride, padding):
    x = _as_f32c(x)
    n, _, h, win = x.shape
    co, ci, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    xp = _pad_nchw(x, padding).astype(np.float64)
    w64 = w.astype(np.float64)
    d64 = dout.astype(np.float64)
    dxp = np.zeros_like(xp)
    dw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
            dw[:, :, i, j] = np.tensordot(d64, xs, axes=([0, 2, 3], [0, 2, 3]))
            # [n,co,oh,ow] x [co,ci] -> [n,oh,ow,ci]
            dxs = np.tensordot(d64, w64[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dxs.transpose(0, 3, 1, 2)
    db = d64.sum(axis=(0, 2, 3))
    dx = dxp[:, :, padding : padding + h, padding : padding + win] if padding else dxp
    return dx.astype(np.float32), dw.astype(np.float32), db.astype(np.float32)


def _pool_windows(x, k, stride):
    sw = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return sw[:, :, ::stride, ::stride]


def maxpool_forward_numpy(x, k, stride):
    x = _as_f32c(x)
    win = _pool_windows(x, k, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(flat, arg[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward_numpy(dout, arg, k, stride, in_hw):
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c) + in_hw, dtype=np.float32)
    ih = (np.arange(oh) * stride)[None, None, :, None] + arg // k
    iw = (np.arange(ow) * stride)[None, None, None, :] + arg % k
    nn, cc = np.ogrid[:n, :c]
    np.add.at(dx, (nn[..., None, None], cc[..., None, None], ih, iw), dout)
    return dx


def avgpool_forward_numpy(x, k, stride):
    x = _as_f32c(x)
    win = _pool_windows(x, k, stride).astype(np.float64)
    return win.mean(axis=(-2, -1)).astype(np.float32)


def avgpool_backward_numpy(dout, k, stride, in_hw):
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c) + in_hw, dtype=np.float32)
    g = dout / np.float32(k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += g
    return dx


# ---------------------------------------------------------------------------
# dispatchers


def conv2d_forward(x, w, b, stride=1, padding=0):
    """NCHW convolution; returns float32 [n, out_ch, oh, ow]."""
    if _BACKEND == "numpy":
        return conv2d_forward_numpy(x, w, b, stride, padding)
    x = _as_f32c(x)
    xp = _pad_nchw(x, padding)
    n = x.shape[0]
    co, _, kh, kw = w.shape
    oh, ow = conv2d_out_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    out = np.empty((n, co, oh, ow), dtype=np.float64)
    _conv2d_fwd_direct(xp.astype(np.float64), w.astype(np.float64), stride, out)
    if b is not None:
        out += b.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def conv2d_backward(x, w, dout, stride=1, padding=0):
    """Gradients (dx, dw, db) for conv2d_forward; db is returned even for bias-free convs."""
    if _BACKEND == "numpy":
        return conv2d_backward_numpy(x, w, dout, stride, padding)
    x = _as_f32c(x)
    h, win = x.shape[2], x.shape[3]
    xp = _pad_nchw(x, padding).astype(np.float64)
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape, dtype=np.float64)
    db = np.zeros(w.shape[0], dtype=np.float64)
    _conv2d_bwd_direct(xp, w.astype(np.float64), dout.astype(np.float64), stride, dxp, dw, db)
    dx = dxp[:, :, padding : padding + h, padding : padding + win] if padding else dxp
    return dx.astype(np.float32), dw.astype(np.float32), db.astype(np.float32)


def maxpool_forward(x, k, stride):
    if _BACKEND == "numpy":
        return maxpool_forward_numpy(x, k, stride)
    x = _as_f32c(x)
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=np.float32)
    arg = np.empty((n, c, oh, ow), dtype=np.int32)
    _maxpool_fwd_direct(x, k, stride, out, arg)
    return out, arg


def maxpool_backward(dout, arg, k, stride, in_hw):
    if _BACKEND == "numpy":
        return maxpool_backward_numpy(dout, arg, k, stride, in_hw)
    dx = np.zeros((dout.shape[0], dout.shape[1]) + in_hw, dtype=np.float32)
    _maxpool_bwd_direct(_as_f32c(dout), arg, k, stride, dx)
    return dx


def avgpool_forward(x, k, stride):
    if _BACKEND == "numpy":
        return avgpool_forward_numpy(x, k, stride)
    x = _as_f32c(x)
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    _avgpool_fwd_direct(x.astype(np.float64), k, stride, out)
    return out.astype(np.float32)


def avgpool_backward(dout, k, stride, in_hw):
    if _BACKEND == "numpy":
        return avgpool_backward_numpy(dout, k, stride, in_hw)
    dx = np.zeros((dout.shape[0], dout.shape[1]) + in_hw, dtype=np.float32)
    _avgpool_bwd_direct(_as_f32c(dout), k, stride, dx)
    return dx


def linear_forward(x, w, b):
    out = x.astype(np.float64) @ w.astype(np.float64).T
    if b is not None:
        out += b.astype(np.float64)
    return out.astype(np.float32)


def linear_backward(x, w, dout):
    d64 = dout.astype(np.float64)
    dx = (d64 @ w.astype(np.float64)).astype(np.float32)
    dw = (d64.T @ x.astype(np.float64)).astype(np.float32)
    db = d64.sum(axis=0).astype(np.float32)
    return dx, dw, db


def warmup() -> None:
    """Trigger JIT compilation of all direct kernels on tiny inputs."""
    if _BACKEND != "numba":
        return
    x = np.ones((1, 1, 4, 4), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = conv2d_forward(x, w, None, 1, 1)
    conv2d_backward(x, w, out, 1, 1)
    o, a = maxpool_forward(x, 2, 2)
    maxpool_backward(o, a, 2, 2, (4, 4))
    avgpool_backward(avgpool_forward(x, 2, 2), 2, 2, (4, 4))
