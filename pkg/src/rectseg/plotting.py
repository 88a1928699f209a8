"""Figures for runs and sweeps, rendered headless to SVG or PNG.

SVG output is byte-stable across reruns: the hash salt is fixed and the
date metadata dropped.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "rectseg",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or y.size < width:
        return y
    return np.convolve(y, np.ones(width) / width, mode="valid")


def loss_curves(path, histories: Mapping[str, np.ndarray], smooth: int = 25, log_y: bool = True) -> Path:
    """One line per named loss history, moving-average smoothed."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, h in histories.items():
            y = _smooth(np.asarray(h, dtype=float), smooth)
            ax.plot(np.arange(y.size) + (h.size - y.size), y, label=name, lw=1.2)
        if log_y:
            ax.set_yscale("log")
        ax.axhline(1e-2, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def threshold_sweep(path, taus: Sequence[float], miou_by_tau: Sequence[float],
                    references: Optional[Dict[str, float]] = None) -> Path:
    """Target mIoU against the fixed threshold, with horizontal reference lines."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        order = np.argsort(taus)
        ax.plot(np.asarray(taus)[order], np.asarray(miou_by_tau)[order], "o-", color="C0", label="thresholded")
        for i, (name, v) in enumerate((references or {}).items()):
            ax.axhline(v, color=f"C{i + 1}", ls="--", lw=1, label=name)
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel("target mIoU")
        ax.legend(frameon=False)
        return _save(fig, path)


def per_class_iou(path, reports: Mapping[str, Sequence[Optional[float]]]) -> Path:
    """Grouped bars of per-class IoU; undefined classes are left empty."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        names = list(reports)
        n_cls = max(len(v) for v in reports.values())
        width = 0.8 / max(1, len(names))
        for i, name in enumerate(names):
            vals = [np.nan if v is None else v for v in reports[name]]
            ax.bar(np.arange(n_cls) + i * width, vals, width, label=name)
        ax.set_xticks(np.arange(n_cls) + 0.4 - width / 2)
        ax.set_xticklabels([str(c) for c in range(n_cls)])
        ax.set_xlabel("class")
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def heatmap_panel(path, image: np.ndarray, certainty_map: np.ndarray, error_mask: np.ndarray) -> Path:
    """Input, certainty and error mask side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7, 2.6))
        axes[0].imshow(np.clip(image, 0, 1), interpolation="nearest")
        axes[0].set_title("input")
        im = axes[1].imshow(certainty_map, cmap="viridis", vmin=0, vmax=1, interpolation="nearest")
        axes[1].set_title("certainty")
        fig.colorbar(im, ax=axes[1], fraction=0.046)
        axes[2].imshow(error_mask, cmap="gray_r", vmin=0, vmax=1, interpolation="nearest")
        axes[2].set_title("errors")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
