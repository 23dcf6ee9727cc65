"""Operator micro-benchmarks.

Each row times one operator on one shape after a warm-up call. The
checksum is the first 16 hex digits of the SHA-256 of the output bytes,
so two runs can be compared without the (non-deterministic) timings.
"""

from __future__ import annotations

import hashlib
import time

import numpy as np

from .errors import ConfigError
from .fdconv import ConvWeights, dilated_conv_ref, fdconv_forward, pgc_smooth_forward
from .tensor_core import Rng

OPS = ("fdconv", "ref", "pgc")
CSV_HEADER = "op,n,c,h,w,k,rate_summary,median_ms,p10_ms,p90_ms,checksum"
MIN_REPEATS = 5


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def bench_op(op: str, shape, k: int = 3, setting: float = 1.0, repeats: int = MIN_REPEATS, seed: int = 0) -> dict:
    """Time ``op`` at ``shape`` = (n, c, h, w).

    ``setting`` is the constant rate for fdconv/ref and the smoothing
    window for pgc (smoothing followed by a plain convolution).
    """
    if op not in OPS:
        raise ConfigError(f"unknown bench op {op!r}; expected one of {OPS}")
    if repeats < MIN_REPEATS:
        raise ConfigError(f"bench needs at least {MIN_REPEATS} repeats")
    n, c, h, w = (int(d) for d in shape)
    rng = Rng(seed)
    x = rng.normal(0.0, 1.0, (n, c, h, w))
    weights = ConvWeights.gaussian(c, c, k, 0.01, rng)
    if op == "fdconv":
        rate = np.full((h, w), setting, dtype=np.float32)
        run = lambda: fdconv_forward(x, weights, rate)  # noqa: E731
        summary = f"r={setting:g}"
    elif op == "ref":
        run = lambda: dilated_conv_ref(x, weights, int(setting))  # noqa: E731
        summary = f"r={int(setting)}"
    else:
        # sigma grows down the rows like a perspective map
        sigma = np.repeat(np.linspace(0.5, 2.0, h)[:, None], w, axis=1)
        window = int(setting)
        run = lambda: dilated_conv_ref(pgc_smooth_forward(x, sigma, window), weights, 1)  # noqa: E731
        summary = f"window={window}"

    out = run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1e3)
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    return {
        "op": op, "n": n, "c": c, "h": h, "w": w, "k": k, "rate_summary": summary,
        "median_ms": float(med), "p10_ms": float(p10), "p90_ms": float(p90), "checksum": checksum(out),
    }


def format_row(row: dict) -> str:
    return (f"{row['op']},{row['n']},{row['c']},{row['h']},{row['w']},{row['k']},{row['rate_summary']},"
            f"{row['median_ms']:.3f},{row['p10_ms']:.3f},{row['p90_ms']:.3f},{row['checksum']}")
