"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training(steps, loss, mae, path) -> None:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(steps, loss, lw=1)
    a1.set_yscale("log")
    a1.set_xlabel("iteration")
    a1.set_ylabel("density loss")
    a2.plot(steps, mae, lw=1, color="tab:orange")
    a2.set_xlabel("iteration")
    a2.set_ylabel("batch MAE")
    _save(fig, path)


def plot_psnr(epochs, psnr, path, phase: int) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, psnr, marker=".", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"PENet phase {phase}")
    _save(fig, path)


def plot_bench(rows, path) -> None:
    labels = [f"{r['op']}\n{r['rate_summary']}" for r in rows]
    med = np.array([r["median_ms"] for r in rows])
    err = np.array([[m - r["p10_ms"], r["p90_ms"] - m] for r, m in zip(rows, med)]).T
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.5))
    ax.bar(range(len(rows)), med, yerr=err, capsize=3)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("median ms")
    _save(fig, path)


def plot_density(pred, gt, path, title: str = "") -> None:
    panels = [("prediction", pred)] + ([("ground truth", gt)] if gt is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.5), squeeze=False)
    vmax = max(float(np.max(p)) for _, p in panels) or 1.0
    for ax, (name, grid) in zip(axes[0], panels):
        im = ax.imshow(grid, cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(f"{name}: {float(np.sum(grid, dtype=np.float64)):.1f}")
        ax.axis("off")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
