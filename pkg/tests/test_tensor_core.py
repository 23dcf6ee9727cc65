import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfdnet.errors import DomainError, ShapeError
from pfdnet.tensor_core import DTYPE, Rng, new_grid, new_tensor, reduce, resample_grid


def test_zero_fill():
    t = new_tensor((1, 1, 2, 2), 0.0)
    assert t.dtype == DTYPE and reduce(t, "sum") == 0.0


def test_constant_fill():
    assert reduce(new_tensor((1, 1, 2, 2), 3.0), "sum") == 12.0


def test_gaussian_fill_is_seeded():
    a = new_tensor((1, 2, 4, 4), ("gaussian", 0.0, 0.01), Rng(7))
    b = new_tensor((1, 2, 4, 4), ("gaussian", 0.0, 0.01), Rng(7))
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32


@pytest.mark.parametrize("shape", [(0, 1, 2, 2), (1, 1, 0, 2), (1, 2, 3)])
def test_bad_shapes_rejected(shape):
    with pytest.raises(ShapeError):
        new_tensor(shape)


def test_grid_zero_dim_rejected():
    with pytest.raises(ShapeError):
        new_grid((0, 3))


def test_reductions():
    g = np.array([[1, 2], [3, 4]], dtype=np.float32)
    assert reduce(g, "sum") == 10
    assert reduce(g, "max") == 4
    assert reduce(g, "mean") == 2.5
    with pytest.raises(DomainError):
        reduce(g, "median")


def test_average_pool_keeps_constant():
    out = resample_grid(np.full((4, 4), 2.0, dtype=np.float32), 2, 2, "average-pool")
    assert np.array_equal(out, np.full((2, 2), 2.0))


def test_sum_pool_to_one():
    out = resample_grid(np.array([[1, 2], [3, 4]], dtype=np.float32), 1, 1, "sum-pool")
    assert out.tolist() == [[10.0]]


def test_bilinear_center():
    out = resample_grid(np.array([[0, 1], [2, 3]], dtype=np.float32), 3, 3, "bilinear")
    # half-pixel centres: output (1, 1) sits at source (0.5, 0.5)
    assert out[1, 1] == pytest.approx(1.5, abs=1e-6)


def test_incompatible_factor():
    with pytest.raises(ShapeError, match="incompatible"):
        resample_grid(np.zeros((5, 5), dtype=np.float32), 2, 2, "average-pool")
    with pytest.raises(ShapeError):
        resample_grid(np.zeros((4, 4), dtype=np.float32), 8, 8, "sum-pool")


def test_unknown_mode():
    with pytest.raises(DomainError):
        resample_grid(np.zeros((4, 4), dtype=np.float32), 2, 2, "nearest")


def test_resample_keeps_leading_axes():
    g = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    out = resample_grid(g, 2, 2, "sum-pool")
    assert out.shape == (2, 3, 2, 2)
    assert out[1, 2].sum() == g[1, 2].sum()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_sum_pool_conserves_total(fh, fw, oh, ow, seed):
    g = Rng(seed).uniform(0.0, 1.0, (oh * fh, ow * fw))
    out = resample_grid(g, oh, ow, "sum-pool")
    assert math.isclose(reduce(out, "sum"), reduce(g, "sum"), rel_tol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_integer_grid_sum_pool_exact(seed):
    g = Rng(seed).integers(0, 100, (8, 6)).astype(np.float32)
    assert reduce(resample_grid(g, 2, 3, "sum-pool"), "sum") == reduce(g, "sum")


def test_reshape_round_trip(rng):
    t = new_tensor((2, 3, 4, 5), ("gaussian", 0.0, 1.0), rng)
    assert np.array_equal(t.reshape(-1).reshape(2, 3, 4, 5), t)


def test_rng_spawn_independent_and_stable():
    a, b = Rng(5).spawn(0), Rng(5).spawn(0)
    assert a.normal(0, 1, 4).tobytes() == b.normal(0, 1, 4).tobytes()
    assert Rng(5).spawn(0).normal(0, 1, 4).tobytes() != Rng(5).spawn(1).normal(0, 1, 4).tobytes()


def test_rng_state_round_trip():
    r = Rng(3)
    r.normal(0, 1, 3)
    state = r.get_state()
    first = r.normal(0, 1, 5)
    r.set_state(state)
    assert np.array_equal(first, r.normal(0, 1, 5))


def test_rng_seed_range():
    with pytest.raises(DomainError):
        Rng(-1)
