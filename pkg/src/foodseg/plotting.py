"""Figures and overlay panels written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

GUTTER = 4
RC = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "foodseg",
}


def palette(num_classes: int) -> np.ndarray:
    """Fixed colour per class id (background black); independent of run state."""
    rng = np.random.default_rng(20230512)
    colors = rng.integers(40, 256, size=(max(num_classes, 1), 3), dtype=np.int64).astype(np.uint8)
    colors[0] = 0
    return colors


def colorize(mask: np.ndarray, colors: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.max(initial=0) >= len(colors):
        raise ValueError(f"mask id {mask.max()} has no palette entry")
    return colors[mask]


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_panel(image: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray,
                 colors: np.ndarray | None = None, gutter: int = GUTTER) -> np.ndarray:
    """input | prediction | ground truth, separated by white gutters; H x (3W + 2g) x 3 uint8."""
    if not (image.shape[:2] == pred_mask.shape == gt_mask.shape):
        raise ValueError("image, prediction and ground truth must share spatial size")
    if colors is None:
        colors = palette(int(max(pred_mask.max(initial=0), gt_mask.max(initial=0))) + 1)
    h, w = pred_mask.shape
    panel = np.full((h, 3 * w + 2 * gutter, 3), 255, dtype=np.uint8)
    for i, tile in enumerate((to_uint8(image), colorize(pred_mask, colors), colorize(gt_mask, colors))):
        x0 = i * (w + gutter)
        panel[:, x0:x0 + w] = tile
    return panel


def render_report(image, pred_mask, gt_mask, path, colors=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_panel(image, pred_mask, gt_mask, colors)).save(path)
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_long_tail(iou: np.ndarray, train_images: np.ndarray, path, threshold: int = 10,
                   names: Sequence[str] | None = None) -> Path:
    """Per-class IoU against train image count (foreground classes)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ok = ~np.isnan(iou)
        ok[0] = False
        x, y = np.asarray(train_images)[ok], np.asarray(iou)[ok]
        tail = x <= threshold
        ax.scatter(x[~tail], y[~tail], s=14, color="0.35", label="head")
        ax.scatter(x[tail], y[tail], s=18, color="tab:red", label=f"<= {threshold} train images")
        if names is not None:
            for c in np.flatnonzero(ok):
                if train_images[c] <= threshold:
                    ax.annotate(names[c], (train_images[c], iou[c]), fontsize=7,
                                xytext=(3, 2), textcoords="offset points")
        ax.axvline(threshold, color="tab:red", lw=0.8, ls=":")
        if len(x) and x.max() > 50:
            ax.set_xscale("log")
        ax.set_xlabel("train images containing class")
        ax.set_ylabel("IoU")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_class_frequency(train_images: np.ndarray, test_images: np.ndarray, path,
                         threshold: int = 10) -> Path:
    """Sorted per-class image counts (foreground), split train/test."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        order = np.argsort(-np.asarray(train_images[1:]), kind="stable") + 1
        xs = np.arange(len(order))
        ax.bar(xs, np.asarray(train_images)[order], width=0.9, color="0.4", label="train")
        ax.bar(xs, np.asarray(test_images)[order], width=0.5, color="tab:orange", label="test")
        ax.axhline(threshold, color="tab:red", lw=0.8, ls=":")
        ax.set_yscale("symlog", linthresh=10)
        ax.set_xlabel("class (sorted by train count)")
        ax.set_ylabel("images")
        ax.legend()
        return _save(fig, path)


def plot_training_curve(iterations, losses, path, val_iterations=None, val_miou=None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(iterations, losses, lw=0.8, color="0.3")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if val_iterations:
            ax2 = ax.twinx()
            ax2.plot(val_iterations, val_miou, "o-", color="tab:blue", ms=3)
            ax2.set_ylabel("val mIoU", color="tab:blue")
            ax2.set_ylim(0, 1)
        return _save(fig, path)


def plot_token_iou(matrix, names: Sequence[str], path) -> Path:
    m = np.array([[np.nan if v is None else v for v in row] for row in matrix], dtype=float)
    with plt.rc_context(RC):
        n = len(names)
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
        im = ax.imshow(m, cmap="viridis", vmin=0, vmax=max(np.nanmax(m), 1e-6))
        ax.set_xticks(range(n), names, rotation=45, ha="right")
        ax.set_yticks(range(n), names)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, "-" if np.isnan(m[i, j]) else f"{m[i, j]:.2f}", ha="center", va="center",
                        fontsize=7, color="w")
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)
