"""Fractional-dilation convolution.

A K x K filter centred on output position p = (i, j) reads its taps at
p + p_k * r(p), where p_k runs over the integer offsets of the kernel and
r(p) is a non-negative real dilation rate. Non-integer tap positions are
read by bilinear interpolation with zero padding outside the feature map:

    x(p_hat) = sum_q g(q_i, i_hat) * g(q_j, j_hat) * x(q),
    g(m, n) = max(0, 1 - |m - n|).

Besides the forward pass this module provides the full backward pass
(weights, bias, input and rate map), a direct integer-rate dilated
convolution used as an oracle, and the spatially variant Gaussian
smoothing baseline (forward only) used for runtime comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DomainError, ShapeError
from .tensor_core import DTYPE, Rng

SIGMA_MIN = 1e-3


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.kernel.dtype.kind != "f":
            self.kernel = self.kernel.astype(DTYPE)
        self.bias = np.asarray(self.bias, dtype=self.kernel.dtype)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"kernel must be (c_out, c_in, k, k), got {self.kernel.shape}")
        if self.kernel.shape[2] % 2 == 0:
            raise DomainError(f"kernel size must be odd, got {self.kernel.shape[2]}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.kernel.shape[0]}")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @classmethod
    def gaussian(cls, c_out: int, c_in: int, k: int, std: float, rng: Rng) -> "ConvWeights":
        return cls(rng.normal(0.0, std, (c_out, c_in, k, k)), np.zeros(c_out, dtype=DTYPE))

    @classmethod
    def zeros_like(cls, other: "ConvWeights") -> "ConvWeights":
        return cls(np.zeros_like(other.kernel), np.zeros_like(other.bias))


@dataclass
class FdconvGrads:
    d_input: np.ndarray
    d_weights: ConvWeights
    d_rate: np.ndarray


def kernel_offsets(k: int) -> list[tuple[int, int]]:
    """Integer offsets p_k in the order kernel[..., a + k//2, b + k//2]."""
    h = k // 2
    return [(a, b) for a in range(-h, h + 1) for b in range(-h, h + 1)]


# ---------------------------------------------------------------------------
# scalar bilinear sampling


def _hat(m: float, n: float) -> float:
    return max(0.0, 1.0 - abs(m - n))


def _hat_slope(m: float, n: float) -> float:
    # d/dn max(0, 1 - |m - n|); zero on the kinks |m - n| in {0, 1}
    d = m - n
    if d == 0.0 or abs(d) >= 1.0:
        return 0.0
    return 1.0 if d > 0 else -1.0


def _neighbors(i_hat: float, j_hat: float):
    if not (math.isfinite(i_hat) and math.isfinite(j_hat)):
        raise DomainError(f"non-finite sampling point ({i_hat}, {j_hat})")
    i0, j0 = math.floor(i_hat), math.floor(j_hat)
    return [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)]


def bilinear_sample(x: np.ndarray, n: int, c: int, p_hat) -> float:
    """Bilinearly interpolated value of x[n, c] at fractional (i_hat, j_hat)."""
    i_hat, j_hat = float(p_hat[0]), float(p_hat[1])
    h, w = x.shape[2:]
    total = 0.0
    for qi, qj in _neighbors(i_hat, j_hat):
        if 0 <= qi < h and 0 <= qj < w:
            total += _hat(qi, i_hat) * _hat(qj, j_hat) * float(x[n, c, qi, qj])
    return total


def bilinear_sample_grads(x: np.ndarray, n: int, c: int, p_hat):
    """Return (d_di, d_dj, d_dx) for the sampled value at p_hat.

    ``d_dx`` maps each in-bounds neighbor with a nonzero coefficient to
    that coefficient.
    """
    i_hat, j_hat = float(p_hat[0]), float(p_hat[1])
    h, w = x.shape[2:]
    d_di = d_dj = 0.0
    d_dx = {}
    for qi, qj in _neighbors(i_hat, j_hat):
        if not (0 <= qi < h and 0 <= qj < w):
            continue
        gi, gj = _hat(qi, i_hat), _hat(qj, j_hat)
        v = float(x[n, c, qi, qj])
        d_di += _hat_slope(qi, i_hat) * gj * v
        d_dj += gi * _hat_slope(qj, j_hat) * v
        if gi * gj != 0.0:
            d_dx[(qi, qj)] = gi * gj
    return d_di, d_dj, d_dx


# ---------------------------------------------------------------------------
# vectorised sampling plan


class _TapPlan:
    """Sparse interpolation operators for one kernel tap.

    Rows index output positions over (n, h, w), columns index input
    positions over (n, h, w); each row has four entries (the neighbors of
    the tap position), zero where the neighbor falls outside the map.
    ``sample`` interpolates, ``slope`` gives the derivative of the sampled
    value along the tap direction p_k for a unit change of the rate.
    """

    __slots__ = ("sample", "slope")

    def __init__(self, rate: np.ndarray, a: int, b: int, dtype):
        n, h, w = rate.shape
        r = rate.astype(np.float64)
        ii = (np.arange(h, dtype=np.float64)[:, None] + a * r).ravel()
        jj = (np.arange(w, dtype=np.float64)[None, :] + b * r).ravel()
        i0 = np.floor(ii)
        j0 = np.floor(jj)
        fi = ii - i0
        fj = jj - j0
        # hat-function slope magnitude; zero on grid lines by convention
        si = np.where(fi == 0.0, 0.0, 1.0)
        sj = np.where(fj == 0.0, 0.0, 1.0)
        i0 = i0.astype(np.int64)
        j0 = j0.astype(np.int64)
        item = np.repeat(np.arange(n, dtype=np.int64) * (h * w), h * w)

        length = ii.size
        idx = np.empty((length, 4), dtype=np.int64)
        coef = np.empty((length, 4), dtype=np.float64)
        slope = np.empty((length, 4), dtype=np.float64)
        corners = (
            (0, 0, 1.0 - fi, 1.0 - fj, -si, -sj),
            (0, 1, 1.0 - fi, fj, -si, sj),
            (1, 0, fi, 1.0 - fj, si, -sj),
            (1, 1, fi, fj, si, sj),
        )
        for k, (di, dj, gi, gj, dgi, dgj) in enumerate(corners):
            qi = i0 + di
            qj = j0 + dj
            inside = (qi >= 0) & (qi < h) & (qj >= 0) & (qj < w)
            idx[:, k] = item + np.clip(qi, 0, h - 1) * w + np.clip(qj, 0, w - 1)
            coef[:, k] = np.where(inside, gi * gj, 0.0)
            slope[:, k] = np.where(inside, a * dgi * gj + b * gi * dgj, 0.0)
        indptr = np.arange(0, 4 * length + 1, 4, dtype=np.int64)
        indices = idx.ravel()
        shape = (length, length)
        self.sample = sparse.csr_matrix((coef.ravel().astype(dtype), indices, indptr), shape=shape)
        self.slope = sparse.csr_matrix((slope.ravel().astype(dtype), indices, indptr), shape=shape)


def _check_rate(x: np.ndarray, rate: np.ndarray) -> np.ndarray:
    rate = np.asarray(rate)
    n, _, h, w = x.shape
    if rate.shape not in ((h, w), (n, h, w)):
        raise ShapeError(f"rate map shape {rate.shape} does not match output {(h, w)}")
    if not np.all(np.isfinite(rate)):
        raise DomainError("rate map contains non-finite values")
    if np.any(rate < 0):
        raise DomainError("rate map contains negative entries")
    return rate


def _check_x(x: np.ndarray, w: ConvWeights) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be (n, c, h, w), got {x.shape}")
    if x.shape[1] != w.kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.kernel.shape[1]}")


def _rows(t: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (n*h*w, c), channels last."""
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _unrows(t: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(t.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _tap_kernels(w: ConvWeights, dtype) -> np.ndarray:
    # (k*k, c_in, c_out), contiguous per tap
    k = w.k
    kern = w.kernel.astype(dtype, copy=False)
    return np.ascontiguousarray(kern.transpose(2, 3, 1, 0)).reshape(k * k, kern.shape[1], kern.shape[0])


def fdconv_forward(x: np.ndarray, w: ConvWeights, rate: np.ndarray, stride: int = 1) -> np.ndarray:
    """y(n, co, p) = bias(co) + sum_ci sum_k w(co, ci, k) * x_hat(n, ci, p + p_k * r(p)).

    ``rate`` is either one (h, w) map shared by the batch or an (n, h, w)
    stack with one map per item.
    """
    if stride != 1:
        raise DomainError("only stride 1 is supported")
    _check_x(x, w)
    rate = _check_rate(x, rate)
    n, _, h, wd = x.shape
    rate3 = np.broadcast_to(rate, (n, h, wd))
    xr = _rows(x)
    taps = _tap_kernels(w, x.dtype)
    y = np.zeros((n * h * wd, w.kernel.shape[0]), dtype=x.dtype)
    for t, (a, b) in enumerate(kernel_offsets(w.k)):
        plan = _TapPlan(rate3, a, b, x.dtype)
        y += (plan.sample @ xr) @ taps[t]
    y += w.bias.astype(x.dtype)
    return _unrows(y, n, h, wd)


def fdconv_backward(x: np.ndarray, w: ConvWeights, rate: np.ndarray, dl_dy: np.ndarray) -> FdconvGrads:
    """Gradients of a scalar loss with respect to input, weights and rate."""
    _check_x(x, w)
    rate = _check_rate(x, rate)
    n, c_in, h, wd = x.shape
    c_out = w.kernel.shape[0]
    if dl_dy.shape != (n, c_out, h, wd):
        raise ShapeError(f"upstream gradient shape {dl_dy.shape} != {(n, c_out, h, wd)}")
    dt = x.dtype
    rate3 = np.broadcast_to(rate, (n, h, wd))
    xr = _rows(x)
    dy = _rows(dl_dy.astype(dt, copy=False))
    taps = _tap_kernels(w, dt)
    hk = w.k // 2

    d_kernel = np.zeros(w.kernel.shape, dtype=dt)
    d_bias = dy.sum(axis=0, dtype=np.float64).astype(dt)
    d_rate = np.zeros(n * h * wd, dtype=np.float64)
    d_x = np.zeros_like(xr)
    for t, (a, b) in enumerate(kernel_offsets(w.k)):
        plan = _TapPlan(rate3, a, b, dt)
        s = plan.sample @ xr  # (L, c_in)
        d_kernel[:, :, a + hk, b + hk] = dy.T @ s
        ds = dy @ taps[t].T  # (L, c_in)
        if a or b:
            proj = plan.slope @ xr
            d_rate += np.einsum("lc,lc->l", ds, proj, dtype=np.float64)
        d_x += plan.sample.T @ ds

    d_rate = d_rate.reshape(n, h, wd)
    if rate.ndim == 2:
        d_rate = d_rate.sum(axis=0)
    return FdconvGrads(
        d_input=_unrows(d_x, n, h, wd),
        d_weights=ConvWeights(d_kernel, d_bias),
        d_rate=d_rate.astype(dt),
    )


def dilated_conv_ref(x: np.ndarray, w: ConvWeights, r: int) -> np.ndarray:
    """Integer-rate dilated convolution with zero padding (same output size)."""
    if int(r) != r or r < 1:
        raise DomainError(f"dilation rate must be a positive integer, got {r}")
    r = int(r)
    _check_x(x, w)
    n, c_in, h, wd = x.shape
    hk = w.k // 2
    pad = hk * r
    kern = w.kernel.astype(x.dtype, copy=False)
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    y = np.zeros((n, kern.shape[0], h * wd), dtype=x.dtype)
    for a, b in kernel_offsets(w.k):
        top, left = pad + a * r, pad + b * r
        window = xp[:, :, top:top + h, left:left + wd].reshape(n, c_in, h * wd)
        y += np.matmul(np.ascontiguousarray(kern[:, :, a + hk, b + hk]), window)
    y += w.bias.astype(x.dtype)[None, :, None]
    return y.reshape(n, -1, h, wd)


def pgc_smooth_forward(x: np.ndarray, sigma: np.ndarray, kernel_size: int) -> np.ndarray:
    """Spatially variant Gaussian smoothing with a per-position sigma.

    The discrete window is renormalized to sum to one over its in-bounds
    taps; positions with sigma below SIGMA_MIN are passed through.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise DomainError(f"kernel_size must be odd, got {kernel_size}")
    if x.ndim != 4:
        raise ShapeError(f"input must be (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape not in ((h, w), (n, h, w)):
        raise ShapeError(f"sigma shape {sigma.shape} does not match input {(h, w)}")
    if np.any(sigma < 0):
        raise DomainError("sigma must be non-negative")
    sig = sigma if sigma.ndim == 3 else sigma[None]
    degenerate = sig < SIGMA_MIN
    inv2s2 = 1.0 / (2.0 * np.maximum(sig, SIGMA_MIN) ** 2)

    half = kernel_size // 2
    xp = np.zeros((n, c, h + 2 * half, w + 2 * half), dtype=x.dtype)
    xp[:, :, half:half + h, half:half + w] = x
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    acc = np.zeros(x.shape, dtype=x.dtype)
    norm = np.zeros(sig.shape, dtype=np.float64)
    for dk in range(-half, half + 1):
        for dl in range(-half, half + 1):
            inside = (rows + dk >= 0) & (rows + dk < h) & (cols + dl >= 0) & (cols + dl < w)
            if dk == 0 and dl == 0:
                wt = np.ones(sig.shape)
            else:
                wt = np.where(degenerate, 0.0, np.exp(-(dk * dk + dl * dl) * inv2s2))
            wt = wt * inside
            norm += wt
            shifted = xp[:, :, half + dk:half + dk + h, half + dl:half + dl + w]
            acc += shifted * wt[:, None].astype(x.dtype)
    return (acc / norm[:, None].astype(x.dtype)).astype(x.dtype)
