"""Density targets, synthetic scenes and scene directories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import DataError, GenerationError
from .tensor_core import DTYPE, Rng, resample_grid

KERNEL_SIZE = 15
KERNEL_SIGMA = 4.0

# synthetic scene geometry
OBJECT_RADIUS_M = 0.8
STRIPE_PERIOD_M = 2.0


@dataclass
class HeadAnnotations:
    points: list  # (x column, y row) in image pixels
    image_id: str = ""

    def __len__(self):
        return len(self.points)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, h, w) in [0, 1], 8-bit quantized
    heads: HeadAnnotations
    persp: np.ndarray  # (h, w), constant per row
    seed: int
    radii: list = field(default_factory=list)


def gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = KERNEL_SIGMA) -> np.ndarray:
    r = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - r
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def make_density(heads, shape) -> np.ndarray:
    """Stamp a 15x15, sigma=4 Gaussian at every head.

    Each head is snapped to its nearest pixel; the stamp is clipped to the
    image and renormalized, so every head contributes exactly one.
    """
    h, w = (int(d) for d in shape)
    points = heads.points if isinstance(heads, HeadAnnotations) else heads
    out = np.zeros((h, w), dtype=np.float64)
    half = KERNEL_SIZE // 2
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"head ({x}, {y}) outside image of shape {(h, w)}")
        cx = min(int(math.floor(x + 0.5)), w - 1)
        cy = min(int(math.floor(y + 0.5)), h - 1)
        top, bottom = max(cy - half, 0), min(cy + half + 1, h)
        left, right = max(cx - half, 0), min(cx + half + 1, w)
        stamp = _KERNEL[top - cy + half:bottom - cy + half, left - cx + half:right - cx + half]
        out[top:bottom, left:right] += stamp / stamp.sum()
    return out.astype(DTYPE)


def density_target(heads, image_shape) -> np.ndarray:
    """Density at half the image resolution (count preserving)."""
    h, w = image_shape
    return resample_grid(make_density(heads, (h, w)), h // 2, w // 2, "sum-pool")


# ---------------------------------------------------------------------------
# synthetic scenes


def _perspective_line(rng: Rng, h: int) -> tuple[float, float]:
    top = rng.uniform(0.004, 0.012) * h
    bottom = top * rng.uniform(2.5, 6.0)
    slope = (bottom - top) / max(h - 1, 1)
    return slope, top


def _place_heads(rng: Rng, count: int, h: int, w: int, radius_of_row) -> list[tuple[float, float]]:
    # row density proportional to 1/s^2: uniform crowd density on the ground
    rows = np.arange(h)
    weight = 1.0 / np.array([radius_of_row(r) for r in rows]) ** 2
    cdf = np.cumsum(weight) / weight.sum()
    points: list[tuple[float, float]] = []
    attempts = 0
    limit = 400 * max(count, 1)
    while len(points) < count:
        attempts += 1
        if attempts > limit:
            raise GenerationError(f"could not place {count} non-overlapping heads in a {h}x{w} image")
        y = float(np.searchsorted(cdf, rng.random())) + rng.random() - 0.5
        y = min(max(y, 0.0), h - 1.0)
        x = rng.random() * (w - 1)
        ry = radius_of_row(y)
        ok = True
        for px, py in points:
            if math.hypot(px - x, py - y) < 1.1 * (ry + radius_of_row(py)):
                ok = False
                break
        if ok:
            points.append((x, y))
    return points


def _render(rng: Rng, h: int, w: int, persp_rows: np.ndarray, points, radii) -> np.ndarray:
    # ground texture: horizontal stripes a fixed number of metres apart
    metres = np.cumsum(1.0 / persp_rows)
    ground = 0.35 + 0.08 * np.sin(2.0 * np.pi * metres / STRIPE_PERIOD_M)
    img = np.empty((3, h, w), dtype=np.float64)
    img[0] = ground[:, None] * 0.9
    img[1] = ground[:, None]
    img[2] = ground[:, None] * 0.8
    img += rng.normal(0.0, 0.02, (3, h, w)).astype(np.float64)
    for (x, y), r in zip(points, radii):
        color = np.array([rng.uniform(0.65, 1.0), rng.uniform(0.45, 0.8), rng.uniform(0.3, 0.6)])
        top, bottom = max(int(y - r - 1), 0), min(int(y + r + 2), h)
        left, right = max(int(x - r - 1), 0), min(int(x + r + 2), w)
        yy, xx = np.mgrid[top:bottom, left:right]
        cover = np.clip(r + 0.5 - np.hypot(yy - y, xx - x), 0.0, 1.0)
        img[:, top:bottom, left:right] = img[:, top:bottom, left:right] * (1 - cover) + color[:, None, None] * cover
    return (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(DTYPE)


def synth_scene(seed: int, image_shape, density_range) -> SyntheticScene:
    h, w = (int(d) for d in image_shape)
    lo, hi = (int(d) for d in density_range)
    if lo < 0 or hi < lo:
        raise GenerationError(f"bad density range {density_range}")
    rng = Rng(seed)
    slope, top = _perspective_line(rng, h)
    persp_rows = slope * np.arange(h, dtype=np.float64) + top
    radius_of_row = lambda y: OBJECT_RADIUS_M * (slope * y + top)  # noqa: E731
    count = int(rng.integers(lo, hi + 1))
    points = _place_heads(rng, count, h, w, radius_of_row)
    radii = [radius_of_row(y) for _, y in points]
    image = _render(rng, h, w, persp_rows, points, radii)
    persp = np.repeat(persp_rows[:, None], w, axis=1).astype(DTYPE)
    return SyntheticScene(image, HeadAnnotations(points, f"scene_{seed}"), persp, seed, radii)


def iter_synth(n_scenes: int, image_shape, density_range, seed: int):
    if n_scenes < 1:
        raise GenerationError("n_scenes must be >= 1")
    root = Rng(seed)
    for i in range(n_scenes):
        child = int(root.spawn(i).integers(0, 2**63))
        scene = synth_scene(child, image_shape, density_range)
        scene.heads.image_id = f"scene_{i:04d}"
        yield scene


def synth_dataset(n_scenes: int, image_shape, density_range, seed: int) -> list[SyntheticScene]:
    return list(iter_synth(n_scenes, image_shape, density_range, seed))


def flip_scene(image: np.ndarray, persp: np.ndarray, density: np.ndarray):
    """Horizontal flip of image, perspective and density consistently."""
    return image[..., ::-1].copy(), persp[..., ::-1].copy(), density[..., ::-1].copy()


# ---------------------------------------------------------------------------
# scene directories: <id>.ppm, <id>.csv, <id>.persp.f32m


def write_scene(directory, scene: SyntheticScene) -> None:
    d = Path(directory)
    sid = scene.heads.image_id
    io.write_ppm(d / f"{sid}.ppm", scene.image)
    io.write_annotations(d / f"{sid}.csv", scene.heads.points)
    io.write_map(d / f"{sid}.persp.f32m", scene.persp)


def scene_ids(directory) -> list[str]:
    ids = sorted(p.name[:-4] for p in Path(directory).glob("*.ppm"))
    if not ids:
        raise DataError(f"no scenes (*.ppm) in {directory}")
    return ids


def load_scene(directory, sid: str) -> SyntheticScene:
    d = Path(directory)
    image = io.read_ppm(d / f"{sid}.ppm")
    shape = image.shape[1:]
    points = io.read_annotations(d / f"{sid}.csv", shape)
    persp_path = d / f"{sid}.persp.f32m"
    persp = io.read_map(persp_path) if persp_path.exists() else None
    if persp is not None and persp.shape != shape:
        raise DataError(f"{persp_path}: shape {persp.shape} does not match image {shape}")
    return SyntheticScene(image, HeadAnnotations(points, sid), persp, seed=0)


def load_scenes(directory) -> list[SyntheticScene]:
    return [load_scene(directory, sid) for sid in scene_ids(directory)]
