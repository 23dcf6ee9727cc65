import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_fdconv
from pfdnet.errors import DomainError, ShapeError
from pfdnet.fdconv import (
    SIGMA_MIN,
    ConvWeights,
    bilinear_sample,
    bilinear_sample_grads,
    dilated_conv_ref,
    fdconv_backward,
    fdconv_forward,
    pgc_smooth_forward,
)
from pfdnet.tensor_core import Rng

X22 = np.array([[[[0, 1], [2, 3]]]], dtype=np.float32)


def brute_sample(x2d, pi, pj):
    h, w = x2d.shape
    return sum(max(0.0, 1 - abs(qi - pi)) * max(0.0, 1 - abs(qj - pj)) * float(x2d[qi, qj])
               for qi in range(h) for qj in range(w))


# --- bilinear sampling -------------------------------------------------------


@pytest.mark.parametrize("p, want", [((0, 0), 0.0), ((0.5, 0.5), 1.5), ((-1, -1), 0.0), ((1, 1), 3.0)])
def test_sample_examples(p, want):
    assert bilinear_sample(X22, 0, 0, p) == pytest.approx(want, abs=1e-12)


def test_sample_matches_full_grid(rng):
    x = rng.normal(0, 1, (1, 1, 5, 5))
    assert bilinear_sample(x, 0, 0, (1.3, 2.7)) == pytest.approx(brute_sample(x[0, 0], 1.3, 2.7), abs=1e-6)


def test_sample_rejects_nonfinite():
    with pytest.raises(DomainError):
        bilinear_sample(X22, 0, 0, (math.nan, 0.0))
    with pytest.raises(DomainError):
        bilinear_sample_grads(X22, 0, 0, (0.0, math.inf))


def test_sample_grads_center():
    d_di, d_dj, _ = bilinear_sample_grads(X22, 0, 0, (0.5, 0.5))
    assert (d_di, d_dj) == pytest.approx((2.0, 1.0))
    # finite-difference cross-check
    h = 1e-3
    fd_i = (bilinear_sample(X22, 0, 0, (0.5 + h, 0.5)) - bilinear_sample(X22, 0, 0, (0.5 - h, 0.5))) / (2 * h)
    fd_j = (bilinear_sample(X22, 0, 0, (0.5, 0.5 + h)) - bilinear_sample(X22, 0, 0, (0.5, 0.5 - h))) / (2 * h)
    assert (fd_i, fd_j) == pytest.approx((2.0, 1.0), abs=1e-9)


def test_sample_grads_constant_field():
    x = np.full((1, 1, 4, 4), 5.0, dtype=np.float32)
    d_di, d_dj, _ = bilinear_sample_grads(x, 0, 0, (1.3, 1.6))
    assert d_di == 0.0 and d_dj == 0.0


def test_sample_grads_coefficients():
    _, d_dj, d_dx = bilinear_sample_grads(X22, 0, 0, (0, 0.25))
    assert d_dx == pytest.approx({(0, 0): 0.75, (0, 1): 0.25})
    assert d_dj == pytest.approx(1.0)


def test_partition_of_unity(rng):
    x = np.zeros((1, 1, 7, 7), dtype=np.float32)
    for _ in range(200):
        p = (rng.uniform(0, 6), rng.uniform(0, 6))
        _, _, coeffs = bilinear_sample_grads(x, 0, 0, p)
        assert sum(coeffs.values()) == pytest.approx(1.0, abs=1e-6)


# --- forward -------------------------------------------------------------------


def delta_kernel(c, k=3):
    kern = np.zeros((c, c, k, k), dtype=np.float32)
    for i in range(c):
        kern[i, i, k // 2, k // 2] = 1.0
    return ConvWeights(kern, np.zeros(c, dtype=np.float32))


def test_delta_kernel_is_identity(rng):
    x = rng.normal(0, 1, (2, 3, 6, 7))
    rate = rng.uniform(0, 4, (6, 7))
    assert np.array_equal(fdconv_forward(x, delta_kernel(3), rate), x)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_integer_rate_matches_reference(rng, r):
    x = rng.normal(0, 1, (2, 3, 9, 8))
    w = ConvWeights(rng.normal(0, 1, (4, 3, 3, 3)), rng.normal(0, 1, 4))
    y = fdconv_forward(x, w, np.full((9, 8), r, dtype=np.float32))
    assert np.max(np.abs(y - dilated_conv_ref(x, w, r))) <= 1e-5


def test_constant_input_constant_output():
    x = np.full((1, 1, 11, 11), 3.0, dtype=np.float32)
    kern = np.full((1, 1, 3, 3), 2.0 / 9, dtype=np.float32)
    y = fdconv_forward(x, ConvWeights(kern, np.zeros(1, np.float32)), np.full((11, 11), 1.5, np.float32))
    assert np.allclose(y[0, 0, 2:-2, 2:-2], 6.0, atol=1e-5)


def test_forward_matches_naive_oracle(rng):
    x = rng.normal(0, 1, (1, 2, 5, 6))
    w = ConvWeights(rng.normal(0, 1, (2, 2, 3, 3)), rng.normal(0, 1, 2))
    rate = rng.uniform(0.0, 3.0, (5, 6))
    y = fdconv_forward(x, w, rate)
    assert np.allclose(y, naive_fdconv(x, w.kernel, w.bias, rate), atol=1e-5)


def test_per_item_rates(rng):
    x = rng.normal(0, 1, (2, 2, 5, 5))
    w = ConvWeights(rng.normal(0, 1, (3, 2, 3, 3)), np.zeros(3, np.float32))
    rate = rng.uniform(0.2, 2.5, (2, 5, 5))
    y = fdconv_forward(x, w, rate)
    for b in range(2):
        assert np.allclose(y[b:b + 1], fdconv_forward(x[b:b + 1], w, rate[b]), atol=1e-6)


def test_forward_errors(rng):
    x = rng.normal(0, 1, (1, 2, 5, 5))
    w = ConvWeights(rng.normal(0, 1, (2, 2, 3, 3)), np.zeros(2, np.float32))
    with pytest.raises(ShapeError):
        fdconv_forward(x, w, np.ones((4, 5), np.float32))
    with pytest.raises(DomainError):
        fdconv_forward(x, w, -np.ones((5, 5), np.float32))
    with pytest.raises(DomainError):
        fdconv_forward(x, w, np.ones((5, 5), np.float32), stride=2)
    with pytest.raises(DomainError):
        ConvWeights(np.zeros((1, 1, 2, 2)), np.zeros(1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_linear_in_input_and_weights(seed, a, b):
    rng = Rng(seed)
    x1, x2 = rng.normal(0, 1, (1, 2, 5, 5)), rng.normal(0, 1, (1, 2, 5, 5))
    k1, k2 = rng.normal(0, 1, (2, 2, 3, 3)), rng.normal(0, 1, (2, 2, 3, 3))
    zero = np.zeros(2, np.float32)
    rate = rng.uniform(0, 3, (5, 5))
    w1 = ConvWeights(k1, zero)
    lhs = fdconv_forward((a * x1 + b * x2).astype(np.float32), w1, rate)
    rhs = a * fdconv_forward(x1, w1, rate) + b * fdconv_forward(x2, w1, rate)
    assert np.allclose(lhs, rhs, rtol=1e-4, atol=1e-4 * (1 + np.abs(rhs).max()))
    lhs = fdconv_forward(x1, ConvWeights((a * k1 + b * k2).astype(np.float32), zero), rate)
    rhs = a * fdconv_forward(x1, w1, rate) + b * fdconv_forward(x1, ConvWeights(k2, zero), rate)
    assert np.allclose(lhs, rhs, rtol=1e-4, atol=1e-4 * (1 + np.abs(rhs).max()))


# --- backward ----------------------------------------------------------------


def test_zero_upstream_gives_zero_grads(rng):
    x = rng.normal(0, 1, (1, 2, 6, 6))
    w = ConvWeights(rng.normal(0, 1, (2, 2, 3, 3)), np.zeros(2, np.float32))
    g = fdconv_backward(x, w, rng.uniform(1.2, 1.8, (6, 6)), np.zeros((1, 2, 6, 6), np.float32))
    assert not g.d_input.any() and not g.d_weights.kernel.any() and not g.d_weights.bias.any() and not g.d_rate.any()


def test_constant_field_has_no_rate_gradient(rng):
    x = np.full((1, 2, 6, 6), 4.0, dtype=np.float32)
    w = ConvWeights(rng.normal(0, 1, (2, 2, 3, 3)), np.zeros(2, np.float32))
    rate = rng.uniform(0.2, 0.8, (6, 6))  # every tap stays inside the map
    g = fdconv_backward(x, w, rate, rng.normal(0, 1, (1, 2, 6, 6)))
    assert np.abs(g.d_rate[1:-1, 1:-1]).max() < 1e-5


def test_grad_shapes(rng):
    x = rng.normal(0, 1, (2, 3, 5, 4))
    w = ConvWeights(rng.normal(0, 1, (2, 3, 3, 3)), np.zeros(2, np.float32))
    g = fdconv_backward(x, w, rng.uniform(1.1, 1.9, (5, 4)), rng.normal(0, 1, (2, 2, 5, 4)))
    assert g.d_input.shape == x.shape and g.d_weights.kernel.shape == w.kernel.shape
    assert g.d_weights.bias.shape == (2,) and g.d_rate.shape == (5, 4)


def test_sum_of_squares_finite_differences(rng):
    """L = sum(y^2) on (1,2,6,6), rates in (1.2, 1.8); oracle evaluated in float64."""
    x = rng.normal(0, 1, (1, 2, 6, 6))
    w = ConvWeights(rng.normal(0, 0.5, (2, 2, 3, 3)), rng.normal(0, 0.5, 2))
    rate = rng.uniform(1.2, 1.8, (6, 6))
    y = fdconv_forward(x, w, rate)
    g = fdconv_backward(x, w, rate, 2 * y)

    x64, k64, b64, r64 = (a.astype(np.float64) for a in (x, w.kernel, w.bias, rate))

    def loss():
        return float((fdconv_forward(x64, ConvWeights(k64, b64), r64) ** 2).sum())

    def fd(arr, idx, step=1e-3):
        old = arr[idx]
        arr[idx] = old + step
        up = loss()
        arr[idx] = old - step
        down = loss()
        arr[idx] = old
        return (up - down) / (2 * step)

    for analytic, arr in ((g.d_input, x64), (g.d_weights.kernel, k64), (g.d_weights.bias, b64), (g.d_rate, r64)):
        scale = np.abs(analytic).max()
        for idx in itertools.islice(np.ndindex(arr.shape), 0, None, 3):
            num = fd(arr, idx)
            assert abs(num - analytic[idx]) <= 1e-2 * max(abs(num), abs(analytic[idx]), 1e-3 * scale), idx


def test_adjointness(rng):
    x = rng.normal(0, 1, (1, 3, 7, 7)).astype(np.float64)
    w = ConvWeights(rng.normal(0, 1, (2, 3, 3, 3)).astype(np.float64), np.zeros(2))
    rate = rng.uniform(0.1, 2.9, (7, 7)).astype(np.float64)
    dy = rng.normal(0, 1, (1, 2, 7, 7)).astype(np.float64)
    dx = 1e-4 * rng.normal(0, 1, x.shape).astype(np.float64)
    lhs = float((dy * (fdconv_forward(x + dx, w, rate) - fdconv_forward(x, w, rate))).sum())
    rhs = float((fdconv_backward(x, w, rate, dy).d_input * dx).sum())
    assert lhs == pytest.approx(rhs, rel=1e-2)


# --- reference and PGC -------------------------------------------------------------------


def test_ref_pointwise_scaling(rng):
    x = rng.normal(0, 1, (1, 1, 4, 4))
    w = ConvWeights(np.array([[[[2.0]]]], np.float32), np.zeros(1, np.float32))
    assert np.allclose(dilated_conv_ref(x, w, 1), 2 * x)


def test_ref_rate3_hand_trace(rng):
    x = rng.normal(0, 1, (1, 1, 3, 3))
    kern = rng.normal(0, 1, (1, 1, 3, 3))
    y = dilated_conv_ref(x, ConvWeights(kern, np.zeros(1, np.float32)), 3)
    # every off-centre tap lands three pixels away: outside a 3x3 map
    assert y[0, 0, 1, 1] == pytest.approx(kern[0, 0, 1, 1] * x[0, 0, 1, 1], rel=1e-6)


def test_ref_rejects_bad_rate(rng):
    w = ConvWeights(np.zeros((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    x = np.zeros((1, 1, 3, 3), np.float32)
    for r in (0, 1.5, -1):
        with pytest.raises(DomainError):
            dilated_conv_ref(x, w, r)


def test_ref_matches_rate1_fdconv(rng):
    x = rng.normal(0, 1, (2, 2, 6, 5))
    w = ConvWeights(rng.normal(0, 1, (3, 2, 3, 3)), rng.normal(0, 1, 3))
    assert np.max(np.abs(dilated_conv_ref(x, w, 1) - fdconv_forward(x, w, np.ones((6, 5), np.float32)))) <= 1e-5


def brute_pgc(x, sigma, k):
    n, c, h, w = x.shape
    half = k // 2
    out = np.zeros(x.shape)
    for i in range(h):
        for j in range(w):
            s = sigma[i, j]
            wts = {}
            for a in range(-half, half + 1):
                for b in range(-half, half + 1):
                    if 0 <= i + a < h and 0 <= j + b < w:
                        wts[(a, b)] = 1.0 if s < SIGMA_MIN and (a, b) == (0, 0) else (
                            0.0 if s < SIGMA_MIN else math.exp(-(a * a + b * b) / (2 * s * s)))
            z = sum(wts.values())
            for (a, b), wt in wts.items():
                out[:, :, i, j] += wt / z * x[:, :, i + a, j + b]
    return out


def test_pgc_zero_sigma_identity(rng):
    x = rng.normal(0, 1, (1, 2, 5, 5))
    assert np.array_equal(pgc_smooth_forward(x, np.zeros((5, 5)), 3), x)


def test_pgc_constant_preserved():
    x = np.full((1, 1, 6, 6), 2.5, np.float32)
    sigma = np.linspace(0.3, 2, 36).reshape(6, 6)
    assert np.allclose(pgc_smooth_forward(x, sigma, 7), 2.5, atol=1e-6)


def test_pgc_matches_brute_force(rng):
    x = rng.normal(0, 1, (1, 2, 6, 5))
    sigma = np.full((6, 5), 0.75)
    assert np.allclose(pgc_smooth_forward(x, sigma, 3), brute_pgc(x, sigma, 3), atol=1e-6)
    sigma = rng.uniform(0, 2, (6, 5)).astype(np.float64)
    sigma[0, 0] = 0.0
    assert np.allclose(pgc_smooth_forward(x, sigma, 5), brute_pgc(x, sigma, 5), atol=1e-6)


def test_pgc_errors(rng):
    x = rng.normal(0, 1, (1, 1, 4, 4))
    with pytest.raises(DomainError):
        pgc_smooth_forward(x, np.ones((4, 4)), 4)
    with pytest.raises(DomainError):
        pgc_smooth_forward(x, -np.ones((4, 4)), 3)


def test_pgc_zero_sigma_then_conv_equals_conv(rng):
    x = rng.normal(0, 1, (1, 2, 6, 6))
    w = ConvWeights(rng.normal(0, 1, (2, 2, 3, 3)), rng.normal(0, 1, 2))
    plain = dilated_conv_ref(x, w, 1)
    assert np.array_equal(dilated_conv_ref(pgc_smooth_forward(x, np.zeros((6, 6)), 5), w, 1), plain)
