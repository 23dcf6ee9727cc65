"""Plain convolutional building blocks with explicit backward passes.

All functions work on (n, c, h, w) arrays and keep the input dtype.
Convolutions use an im2col layout so each call is a single matrix
product; the col2im scatter is a fixed sequence of strided slice-adds,
so results never depend on thread count.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor_core import bilinear_matrix

LEAKY_SLOPE = 0.2


def _pad(x: np.ndarray, top: int, left: int, bottom: int, right: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=x.dtype)
    out[:, :, top:top + h, left:left + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, hp, wp) -> (n*ho*wo, c*k*k)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = padded_shape
    blocks = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += blocks[:, :, u, v]
    return out


def _to_nchw(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _to_rows(t: np.ndarray) -> np.ndarray:
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, weight, bias, stride: int = 1, pad: int = 0):
    """Cross-correlation; weight is (c_out, c_in, k, k)."""
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = _im2col(_pad(x, pad, pad, pad, pad), k, stride, ho, wo)
    y = cols @ weight.reshape(c_out, -1).T.astype(x.dtype, copy=False)
    y += bias.astype(x.dtype, copy=False)
    return _to_nchw(y, n, ho, wo)


def conv2d_backward(x, weight, dy, stride: int = 1, pad: int = 0):
    """Return (dx, dweight, dbias)."""
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    ho, wo = dy.shape[2:]
    xp_shape = (n, c, h + 2 * pad, w + 2 * pad)
    cols = _im2col(_pad(x, pad, pad, pad, pad), k, stride, ho, wo)
    dyr = _to_rows(dy.astype(x.dtype, copy=False))
    dweight = (dyr.T @ cols).reshape(weight.shape)
    dbias = dyr.sum(axis=0, dtype=np.float64).astype(x.dtype)
    dcols = dyr @ weight.reshape(c_out, -1).astype(x.dtype, copy=False)
    dxp = _col2im(dcols, xp_shape, k, stride, ho, wo)
    return dxp[:, :, pad:pad + h, pad:pad + w], dweight, dbias


def conv_transpose2d_forward(x, weight, bias, stride: int = 2, pad: int = 1, out_pad: int = 1):
    """Transposed convolution; weight is (c_in, c_out, k, k).

    Output size is (h - 1) * stride - 2 * pad + k + out_pad, which doubles
    the input for k=3, stride=2, pad=1, out_pad=1.
    """
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    cols = _to_rows(x) @ weight.reshape(c_in, -1).astype(x.dtype, copy=False)
    full = _col2im(cols, (n, c_out, full_h + out_pad, full_w + out_pad), k, stride, h, w)
    ho, wo = full_h - 2 * pad + out_pad, full_w - 2 * pad + out_pad
    y = full[:, :, pad:pad + ho, pad:pad + wo]
    return y + bias.astype(x.dtype, copy=False)[None, :, None, None]


def conv_transpose2d_backward(x, weight, dy, stride: int = 2, pad: int = 1, out_pad: int = 1):
    """Return (dx, dweight, dbias)."""
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    full_h, full_w = (h - 1) * stride + k + out_pad, (w - 1) * stride + k + out_pad
    ho, wo = dy.shape[2:]
    dfull = np.zeros((n, c_out, full_h, full_w), dtype=x.dtype)
    dfull[:, :, pad:pad + ho, pad:pad + wo] = dy
    dcols = _im2col(dfull, k, stride, h, w)  # (n*h*w, c_out*k*k)
    xr = _to_rows(x)
    dweight = (xr.T @ dcols).reshape(weight.shape)
    dx = _to_nchw(dcols @ weight.reshape(c_in, -1).T.astype(x.dtype, copy=False), n, h, w)
    dbias = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    return dx, dweight, dbias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(pre, dy):
    return dy * (pre > 0)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x).astype(x.dtype)


def leaky_relu_backward(pre, dy, slope: float = LEAKY_SLOPE):
    return np.where(pre > 0, dy, slope * dy).astype(dy.dtype)


def maxpool2_forward(x):
    """2x2 max-pool, stride 2. Returns (y, argmax) for the backward pass."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2_backward(arg, dy):
    n, c, h2, w2 = dy.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def upsample_matrices(h: int, w: int, factor: int, dtype):
    return bilinear_matrix(h, h * factor).astype(dtype), bilinear_matrix(w, w * factor).astype(dtype)


def upsample_forward(x, factor: int):
    """Bilinear upsampling of the last two axes by an integer factor."""
    mh, mw = upsample_matrices(x.shape[-2], x.shape[-1], factor, x.dtype)
    return np.matmul(np.matmul(mh, x), mw.T)


def upsample_backward(dy, factor: int):
    h, w = dy.shape[-2] // factor, dy.shape[-1] // factor
    mh, mw = upsample_matrices(h, w, factor, dy.dtype)
    return np.matmul(np.matmul(mh.T, dy), mw)
