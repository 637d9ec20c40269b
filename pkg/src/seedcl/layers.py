"""Array-level layer primitives with hand-derived backward passes.

Every forward returns (out, cache); the matching backward consumes the cache
and upstream gradient. All math runs in the dtype of its inputs, so the same
code serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

GN_EPS = 1e-5


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding windows of a padded NCHW array into (N, C, kh, kw, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """x: (N, C, H, W), w: (O, C, KH, KW), b: (O,) -> (N, O, OH, OW)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _window_view(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (N, OH, OW, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, cols, w, stride, pad = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O, C, KH, KW)
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # (N, OH, OW, C, KH, KW)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, db


def group_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, group_size: int = 8):
    """Per-sample group normalization over channel groups of `group_size`."""
    n, c, h, w = x.shape
    g = c // group_size
    xg = x.reshape(n, g, group_size * h * w)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + GN_EPS)
    xhat = ((xg - mean) * inv_std).reshape(n, c, h, w)
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, group_size)


def group_norm_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, group_size = cache
    n, c, h, w = dout.shape
    g = c // group_size
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = (dout * gamma[None, :, None, None]).reshape(n, g, group_size * h * w)
    xhat_g = xhat.reshape(n, g, group_size * h * w)
    mean_dxhat = dxhat.mean(axis=2, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat_g).mean(axis=2, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat_g * mean_dxhat_xhat)
    return dx.reshape(n, c, h, w), dgamma, dbeta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * cache


def max_pool_forward(x: np.ndarray, k: int = 3, stride: int = 2, pad: int = 1):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    cols = _window_view(xp, k, k, stride, oh, ow)
    flat = cols.reshape(n, c, k * k, oh, ow)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    return out, (x.shape, arg, k, stride, pad)


def max_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, arg, k, stride, pad = cache
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        mask = arg == idx
        dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dout * mask
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


def global_avg_pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (x.shape,)


def global_avg_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    (x_shape,) = cache
    n, c, h, w = x_shape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), x_shape).astype(dout.dtype, copy=True)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (N, D), w: (D, M), b: (M,)."""
    return x @ w + b, (x, w)


def linear_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)
