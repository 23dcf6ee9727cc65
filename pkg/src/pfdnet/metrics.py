"""Counting metrics: MAE, RMSE and the grid average error GAME(L)."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, UsageError


def mae_rmse(preds, gts) -> tuple[float, float]:
    preds = [float(p) for p in preds]
    gts = [float(g) for g in gts]
    if len(preds) != len(gts) or not preds:
        raise UsageError(f"need equal, nonzero numbers of counts (got {len(preds)} and {len(gts)})")
    n = len(preds)
    mae = math.fsum(abs(g - p) for p, g in zip(preds, gts)) / n
    rmse = math.sqrt(math.fsum((g - p) ** 2 for p, g in zip(preds, gts)) / n)
    return mae, rmse


def _cell_edges(size: int, level: int) -> list[int]:
    # Halve each cell once per level; on odd sizes the later half takes the
    # extra pixel. The partitions are nested, so GAME cannot drop with L.
    edges = [0, size]
    for _ in range(level):
        nxt = [0]
        for a, b in zip(edges, edges[1:]):
            nxt += [a + (b - a) // 2, b]
        edges = nxt
    return edges


def game(pred: np.ndarray, gt: np.ndarray, level: int) -> float:
    """Sum over a 2^L x 2^L grid of |pred count - gt count| per cell."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise UsageError(f"GAME needs equal 2-D shapes, got {pred.shape} and {gt.shape}")
    if level < 0:
        raise ShapeError("GAME level must be >= 0")
    cells = 2**level
    rows = _cell_edges(pred.shape[0], level)
    cols = _cell_edges(pred.shape[1], level)
    total = []
    for i in range(cells):
        for j in range(cells):
            cell = (slice(rows[i], rows[i + 1]), slice(cols[j], cols[j + 1]))
            total.append(abs(math.fsum(pred[cell].ravel()) - math.fsum(gt[cell].ravel())))
    return math.fsum(total)
