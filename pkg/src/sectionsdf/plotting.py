"""Report figures written to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .geometry import CrossSectionSet

LOSS_TERMS = ("loss_total", "loss_on", "loss_off", "loss_eik", "loss_min")


def _figure(width: float = 6.4, height: float = 4.0, ncols: int = 1):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    axes = [fig.add_subplot(1, ncols, k + 1) for k in range(ncols)]
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp metadata so repeated runs write identical files
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_training_log(rows: Sequence[dict], path) -> Path:
    """Loss terms (log scale) and the off-set fraction per epoch."""
    fig, (ax0, ax1) = _figure(10.0, 4.0, ncols=2)
    epochs = np.array([r["epoch"] for r in rows])
    for name in LOSS_TERMS:
        vals = np.array([r[name] for r in rows], dtype=float)
        vals = np.where(vals > 0, vals, np.nan)
        ax0.semilogy(epochs, vals, label=name.removeprefix("loss_"))
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("loss")
    ax0.legend(frameon=False, fontsize=8)
    ax1.plot(epochs, [100 * r["off_fraction"] for r in rows], color="C3")
    ax1.axhline(1.0, color="0.6", lw=0.8, ls="--")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("off-set fraction (%)")
    return _save(fig, path)


def plot_distance_histogram(d_pred_to_gt: np.ndarray, d_gt_to_pred: np.ndarray, path, scale: float = 100.0) -> Path:
    """One-sided nearest-neighbour distance distributions (x `scale`)."""
    fig, (ax,) = _figure()
    hi = scale * max(float(np.max(d_pred_to_gt)), float(np.max(d_gt_to_pred)), 1e-12)
    bins = np.linspace(0.0, hi, 60)
    ax.hist(scale * d_pred_to_gt, bins=bins, alpha=0.6, label="pred -> gt")
    ax.hist(scale * d_gt_to_pred, bins=bins, alpha=0.6, label="gt -> pred")
    ax.set_xlabel(f"distance x{scale:g}")
    ax.set_ylabel("samples")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_slice_iou(ious: Sequence[float], path, labels: Sequence[str] | None = None) -> Path:
    fig, (ax,) = _figure()
    x = np.arange(len(ious))
    ax.bar(x, ious, color="C0")
    ax.set_ylim(min(0.9, min(ious, default=1.0) - 0.02), 1.0)
    ax.set_xticks(x)
    ax.set_xticklabels(labels if labels is not None else [str(i) for i in x])
    ax.set_xlabel("held-out slice")
    ax.set_ylabel("IoU")
    return _save(fig, path)


def plot_sections(sections: CrossSectionSet, path) -> Path:
    """Contours of every plane drawn in world space (three orthographic views)."""
    fig, axes = _figure(12.0, 4.0, ncols=3)
    views = ((0, 1, "x", "y"), (0, 2, "x", "z"), (1, 2, "y", "z"))
    for i, s in enumerate(sections.sections):
        for c in s.contours:
            w = s.plane.to_world(np.vstack([c.vertices, c.vertices[:1]]))
            for ax, (a, b, _, _) in zip(axes, views):
                ax.plot(w[:, a], w[:, b], lw=0.7, color=f"C{i % 10}")
    for ax, (_, _, la, lb) in zip(axes, views):
        ax.set_aspect("equal")
        ax.set_xlabel(la)
        ax.set_ylabel(lb)
    return _save(fig, path)
