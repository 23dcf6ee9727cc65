"""Perspective maps and the perspective -> dilation-rate mapping.

A perspective value is the number of image pixels spanned by one metre
of real-world height. For a planar scene it depends only on the image row,
linearly, so a full map can be recovered from a handful of labelled
person heights by a least-squares line fit.

The rate map of one PFC layer is

    s_norm = 1 / (1 + exp(-alpha * (s - beta)))
    rate   = max(gamma * s_norm + theta, 0)

with (alpha, beta, gamma, theta) learned per layer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .tensor_core import DTYPE

log = logging.getLogger(__name__)

PERSON_HEIGHT_M = 1.75
PERSPECTIVE_FLOOR = 1e-3
RATE_INIT = (1.0, 1.0, 1.5, 1.0)


@dataclass
class RateParams:
    alpha: float = RATE_INIT[0]
    beta: float = RATE_INIT[1]
    gamma: float = RATE_INIT[2]
    theta: float = RATE_INIT[3]
    grads: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.theta], dtype=DTYPE)

    @classmethod
    def from_array(cls, values) -> "RateParams":
        a, b, g, t = (float(v) for v in values)
        return cls(a, b, g, t)

    def set_from_array(self, values) -> None:
        self.alpha, self.beta, self.gamma, self.theta = (float(v) for v in values)


def fit_perspective_map(labeled, out_shape, person_height: float = PERSON_HEIGHT_M) -> np.ndarray:
    """Fit s(y) = a*y + b to labelled (row, observed height px) pairs.

    Every output row is filled with the fitted value; rows where the line
    is not positive are clamped to PERSPECTIVE_FLOOR.
    """
    pts = np.asarray(labeled, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2 or np.unique(pts[:, 0]).size < 2:
        raise DataError("perspective fit needs at least two samples on distinct rows")
    if np.any(pts[:, 1] <= 0):
        raise DataError("observed heights must be positive")
    rows = pts[:, 0]
    s = pts[:, 1] / person_height
    design = np.column_stack([rows, np.ones_like(rows)])
    (slope, intercept), *_ = np.linalg.lstsq(design, s, rcond=None)

    h, w = (int(d) for d in out_shape)
    line = slope * np.arange(h, dtype=np.float64) + intercept
    low = line <= 0
    if np.any(low):
        log.warning("clamping %d non-positive perspective rows to %g", int(low.sum()), PERSPECTIVE_FLOOR)
        line = np.where(low, PERSPECTIVE_FLOOR, line)
    return np.repeat(line[:, None], w, axis=1).astype(DTYPE)


def read_heights_csv(path) -> list[tuple[float, float]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["y_h", "h_px"]:
            raise DataError(f"{path}: expected header 'y_h,h_px'")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{line_no}: bad row {row!r}") from exc
    return out


def normalize_zeta(s: np.ndarray, p: RateParams) -> np.ndarray:
    z = p.alpha * (np.asarray(s, dtype=np.float64) - p.beta)
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(np.result_type(s, DTYPE))


def rate_map(s_tilde: np.ndarray, p: RateParams) -> np.ndarray:
    s_tilde = np.asarray(s_tilde)
    return np.maximum(p.gamma * s_tilde + p.theta, 0.0).astype(np.result_type(s_tilde, DTYPE))


def rate_from_perspective(s: np.ndarray, p: RateParams) -> np.ndarray:
    return rate_map(normalize_zeta(s, p), p)


def rate_backward(s: np.ndarray, p: RateParams, dl_dr: np.ndarray):
    """Chain rule through rate_map(normalize_zeta(s)).

    Returns (grads for alpha, beta, gamma, theta as a length-4 array,
    dL/ds). Positions where the clamp is active contribute nothing.
    """
    s = np.asarray(s, dtype=np.float64)
    dl_dr = np.asarray(dl_dr, dtype=np.float64)
    if s.shape != dl_dr.shape:
        raise ShapeError(f"perspective shape {s.shape} != gradient shape {dl_dr.shape}")
    st = normalize_zeta(s, p).astype(np.float64)
    active = (p.gamma * st + p.theta) > 0
    g = np.where(active, dl_dr, 0.0)
    d_theta = g.sum()
    d_gamma = (g * st).sum()
    ds_tilde = g * p.gamma
    dsig = ds_tilde * st * (1.0 - st)
    d_alpha = (dsig * (s - p.beta)).sum()
    d_beta = (dsig * -p.alpha).sum()
    dl_ds = dsig * p.alpha
    return np.array([d_alpha, d_beta, d_gamma, d_theta]), dl_ds


def mean_perspective(s: np.ndarray) -> np.ndarray:
    """Constant map at the spatial mean (per batch item for stacked maps)."""
    s = np.asarray(s)
    mean = s.astype(np.float64).mean(axis=(-2, -1), keepdims=True)
    return np.broadcast_to(mean, s.shape).astype(np.result_type(s, DTYPE))
