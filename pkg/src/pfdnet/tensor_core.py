"""Dense containers and deterministic primitives.

Tensors are plain ``numpy.ndarray`` objects: a Tensor4 is a C-contiguous
float32 array of shape (n, c, h, w) and a Grid2 a float32 array of shape
(h, w). Functions here validate shapes and never mutate their inputs.

Random numbers come from :class:`Rng`, a thin wrapper over numpy's PCG64
bit generator. PCG64 is a fixed, documented algorithm, so a given seed
yields the same stream on every platform.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float32


class Rng:
    """Seeded random source (PCG64)."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, mean: float, std: float, shape) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(DTYPE)

    def uniform(self, low: float, high: float, shape=None):
        out = self._gen.uniform(low, high, size=shape)
        return out if shape is None else out.astype(DTYPE)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def _check_dims(shape: Sequence[int], rank: int) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != rank:
        raise ShapeError(f"expected {rank} dimensions, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def new_tensor(shape: Sequence[int], fill=0.0, rng: Rng | None = None) -> np.ndarray:
    """Create an (n, c, h, w) float32 tensor.

    ``fill`` is either a number or ``("gaussian", mean, std)``; the
    gaussian form draws from ``rng``.
    """
    shape = _check_dims(shape, 4)
    if isinstance(fill, tuple):
        kind, mean, std = fill
        if kind != "gaussian":
            raise DomainError(f"unknown fill {kind!r}")
        if rng is None:
            raise DomainError("gaussian fill needs an rng")
        return np.ascontiguousarray(rng.normal(mean, std, shape))
    return np.full(shape, fill, dtype=DTYPE)


def new_grid(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    return np.full(_check_dims(shape, 2), fill, dtype=DTYPE)


def as_grid(g) -> np.ndarray:
    g = np.asarray(g, dtype=DTYPE)
    if g.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got shape {g.shape}")
    return g


def reduce(t: np.ndarray, op: str) -> float:
    """Deterministic full reduction. Sums are exactly rounded (fsum)."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    if op == "sum":
        return math.fsum(flat)
    if op == "mean":
        return math.fsum(flat) / flat.size
    if op == "max":
        return float(flat.max())
    raise DomainError(f"unknown reduction {op!r}")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def _pool_factor(n_in: int, n_out: int) -> int:
    if n_out > n_in or n_in % n_out:
        raise ShapeError(f"incompatible resampling factor {n_in} -> {n_out}")
    return n_in // n_out


def resample_grid(g: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Resample the last two axes of ``g``.

    ``average-pool`` and ``sum-pool`` require exact integer reduction
    factors; ``bilinear`` accepts any size.
    """
    g = np.asarray(g)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {(out_h, out_w)}")
    h, w = g.shape[-2:]
    lead = g.shape[:-2]
    if mode in ("average-pool", "sum-pool"):
        fh, fw = _pool_factor(h, out_h), _pool_factor(w, out_w)
        blocks = g.astype(np.float64).reshape(*lead, out_h, fh, out_w, fw)
        out = blocks.sum(axis=(-3, -1))
        if mode == "average-pool":
            out = out / (fh * fw)
        return out.astype(g.dtype if g.dtype.kind == "f" else DTYPE)
    if mode == "bilinear":
        mh = bilinear_matrix(h, out_h)
        mw = bilinear_matrix(w, out_w)
        out = np.einsum("oh,...hw,pw->...op", mh, g.astype(np.float64), mw)
        return out.astype(g.dtype if g.dtype.kind == "f" else DTYPE)
    raise DomainError(f"unknown resampling mode {mode!r}")
