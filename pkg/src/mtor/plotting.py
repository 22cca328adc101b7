"""Static PNG figures for evaluation, sweeps and the toy demo."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ERROR_TYPES, APResult, ErrorHistogram  # noqa: E402

_ERROR_COLORS = {"correct": "#4c9a2a", "mislocalized": "#e0a526", "background": "#c0392b"}


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_map_bars(results: Mapping[str, APResult], categories: Sequence[str], path: Path) -> None:
    """Grouped per-category AP bars, one group per named result, plus mAP."""
    names = list(results)
    labels = list(categories) + ["mAP"]
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(1.4 * len(labels) + 2, 3.5))
    for i, name in enumerate(names):
        r = results[name]
        vals = [100 * r.per_category[c] if c not in r.skipped else 0.0 for c in range(len(categories))]
        ax.bar(x + i * width - 0.4 + width / 2, vals + [100 * r.mAP], width, label=name)
    ax.set_xticks(x, labels)
    ax.set_ylabel("AP@0.5 (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_error_pies(hist: ErrorHistogram, categories: Sequence[str], path: Path) -> None:
    """One pie per category plus the mean, in the three error types."""
    panels = [(categories[c], h) for c, h in hist.per_category.items()] + [("mean", hist.mean)]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.8))
    axes = np.atleast_1d(axes)
    for ax, (title, h) in zip(axes, panels):
        vals = [h[t] for t in ERROR_TYPES]
        if sum(vals) <= 0:
            vals = [0, 0, 1]
        ax.pie(vals, colors=[_ERROR_COLORS[t] for t in ERROR_TYPES], autopct="%1.0f%%", textprops={"fontsize": 7})
        ax.set_title(title, fontsize=9)
    fig.legend(ERROR_TYPES, loc="lower center", ncol=3, fontsize=8)
    _save(fig, path)


def plot_affinity(matrix: np.ndarray, labels: Sequence[int], categories: Sequence[str], path: Path) -> None:
    names = [categories[c] for c in labels]
    n = len(names)
    fig, ax = plt.subplots(figsize=(1 + 0.5 * n + 2, 0.5 * n + 2))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="viridis")
    ax.set_xticks(range(n), names, rotation=60, fontsize=7)
    ax.set_yticks(range(n), names, fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_sweep(param: str, values: Sequence[float], maps: Sequence[float], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    pos = np.arange(len(values))
    ax.plot(pos, maps, marker="o")
    ax.set_xticks(pos, [f"{v:g}" for v in values])
    ax.set_xlabel(param)
    ax.set_ylabel("target mAP@0.5 (%)")
    _save(fig, path)


def plot_toy_rasters(task, rasters: Mapping[str, tuple], path: Path, titles: Mapping[str, str] | None = None) -> None:
    """Decision-boundary panels over the two-moons task, one per regime."""
    lx, ly, ux, _ = task
    fig, axes = plt.subplots(1, len(rasters), figsize=(3 * len(rasters), 2.8))
    axes = np.atleast_1d(axes)
    for ax, (name, (xx, yy, prob)) in zip(axes, rasters.items()):
        ax.contourf(xx, yy, prob, levels=20, cmap="coolwarm", alpha=0.6)
        ax.contour(xx, yy, prob, levels=[0.5], colors="k", linewidths=1)
        ax.scatter(ux[:, 0], ux[:, 1], s=6, c="0.3")
        ax.scatter(lx[:, 0], lx[:, 1], s=60, c=["tab:blue" if y == 0 else "tab:red" for y in ly], edgecolors="k")
        ax.set_title((titles or {}).get(name, name), fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, path)
