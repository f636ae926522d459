"""Figures written next to the CLI reports. Everything renders off-screen."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import DepthMap  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def depth_preview(depth: DepthMap, path, vmax: Optional[float] = None, title: Optional[str] = None):
    """Colour-mapped depth (near = warm), invalid pixels black."""
    with plt.rc_context(STYLE):
        d = np.ma.masked_invalid(depth.depth)
        vmax = vmax or (float(np.percentile(d.compressed(), 98)) if d.count() else 1.0)
        cmap = plt.get_cmap("turbo_r").copy()
        cmap.set_bad("black")
        h, w = depth.depth.shape
        fig, ax = plt.subplots(figsize=(6.0, 6.0 * h / w + 0.6))
        im = ax.imshow(d, cmap=cmap, vmin=0.0, vmax=vmax, interpolation="nearest")
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, orientation="horizontal", fraction=0.05, pad=0.03, label="depth (m)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def error_histogram(errors, path, bins: int = 60, title: Optional[str] = None):
    """Histogram of signed depth errors (prediction minus reference)."""
    errors = np.asarray(errors, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        lim = float(np.percentile(np.abs(errors), 99)) if errors.size else 1.0
        ax.hist(np.clip(errors, -lim, lim), bins=bins, color="#4477aa")
        ax.set_xlabel("depth error (m)")
        ax.set_ylabel("pixels")
        if errors.size:
            rmse = float(np.sqrt(np.mean(errors ** 2)))
            ax.axvline(0.0, color="k", lw=0.6)
            ax.text(0.98, 0.95, f"RMSE {rmse:.3f} m\nn = {errors.size}", transform=ax.transAxes,
                    ha="right", va="top")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def error_map(pred: DepthMap, truth: DepthMap, path, lim: float = 1.0, title: Optional[str] = None):
    """Per-pixel signed error where both maps are valid."""
    both = pred.valid & truth.valid
    err = np.full(pred.depth.shape, np.nan)
    err[both] = pred.depth[both] - truth.depth[both]
    with plt.rc_context(STYLE):
        h, w = err.shape
        fig, ax = plt.subplots(figsize=(6.0, 6.0 * h / w + 0.6))
        cmap = plt.get_cmap("coolwarm").copy()
        cmap.set_bad("black")
        im = ax.imshow(np.ma.masked_invalid(err), cmap=cmap, vmin=-lim, vmax=lim, interpolation="nearest")
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, orientation="horizontal", fraction=0.05, pad=0.03, label="error (m)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def classification_bars(reports: Dict[str, Dict[str, float]], path, keys: Sequence[str] = ("SA", "DA")):
    """Grouped bars of accuracy percentages, one group per named report."""
    names = list(reports)
    x = np.arange(len(names))
    width = 0.8 / max(len(keys), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(names) + 1.5), 3.0))
        for j, k in enumerate(keys):
            vals = [reports[n].get(k) or 0.0 for n in names]
            bars = ax.bar(x + (j - (len(keys) - 1) / 2) * width, vals, width, label=k)
            ax.bar_label(bars, fmt="%.2f", fontsize=7)
        ax.set_xticks(x, names)
        ax.set_ylabel("accuracy (%)")
        lo = min([reports[n].get(k) or 100.0 for n in names for k in keys] + [100.0])
        ax.set_ylim(max(0.0, lo - 5.0), 100.5)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)
