"""Confusion-matrix metrics, sliding-window inference and dataset evaluation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .dataset import AugmentConfig, ClassFrequencyReport, DatasetManifest, normalize, to_tensor

# FoodSeg103 results quoted for comparison only; none of these are reproduced here.
REFERENCE_ROWS = (
    ("BEiT v2 Large", "441M", 49.4),
    ("InternImage-B", "128M", 41.1),
    ("SeTR-MLA", "711M", 45.1),
    ("SeTR-Naive", "723M", 43.9),
    ("Swin-S", "931M", 41.6),
    ("CCNet", "381M", 35.5),
)


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        n = self.num_classes
        if pred.size and (pred.max() >= n or gt.max() >= n or pred.min() < 0 or gt.min() < 0):
            raise ValueError(f"class ids must be in [0, {n})")
        flat = n * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_update(matrix: ConfusionMatrix, pred_mask, gt_mask) -> ConfusionMatrix:
    return matrix.update(pred_mask, gt_mask)


@dataclass
class EvalReport:
    miou: float
    iou: np.ndarray  # nan where the class is absent from both gt and prediction
    gt_pixels: np.ndarray
    miou_no_background: float
    class_names: list[str] = field(default_factory=list)
    train_images: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len(self.iou)

    def rows(self) -> list[dict]:
        rows = []
        for c in range(self.num_classes):
            row = dict(class_id=c, name=self.class_names[c] if self.class_names else str(c),
                       iou="" if np.isnan(self.iou[c]) else f"{self.iou[c]:.6f}",
                       gt_pixels=int(self.gt_pixels[c]))
            if self.train_images is not None:
                row["train_images"] = int(self.train_images[c])
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def long_tail_correlation(self) -> float | None:
        """Spearman correlation between per-class IoU and train image count (foreground only)."""
        if self.train_images is None:
            return None
        ok = ~np.isnan(self.iou)
        ok[0] = False
        if ok.sum() < 3:
            return None
        rho = spearmanr(self.train_images[ok], self.iou[ok]).statistic
        return None if np.isnan(rho) else float(rho)

    def summary(self, threshold: int = 10) -> str:
        lines = [f"mIoU (all classes, incl. background): {self.miou:.4f}",
                 f"mIoU (excluding background):         {self.miou_no_background:.4f}"]
        if self.train_images is not None:
            tail = [c for c in range(1, self.num_classes)
                    if self.train_images[c] <= threshold and not np.isnan(self.iou[c])]
            if tail:
                lines.append(f"long-tail classes (train images <= {threshold}): mean IoU "
                             f"{np.mean([self.iou[c] for c in tail]):.4f} over {len(tail)} classes")
            rho = self.long_tail_correlation()
            if rho is not None:
                lines.append(f"Spearman(IoU, train images): {rho:.3f}")
        lines.append("reference FoodSeg103 results (not reproduced):")
        lines += [f"  {name:<14s} {params:>5s}  mIoU {v:.1f}" for name, params, v in REFERENCE_ROWS]
        return "\n".join(lines)


def miou(matrix: ConfusionMatrix, class_names=None, train_images=None) -> EvalReport:
    """IoU_c = M[c,c] / (row_c + col_c - M[c,c]); classes with row_c + col_c = 0 are skipped."""
    m = matrix.counts.astype(np.float64)
    if m.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(m)
    rows, cols = m.sum(1), m.sum(0)
    present = (rows + cols) > 0
    iou = np.full(matrix.num_classes, np.nan)
    iou[present] = tp[present] / (rows[present] + cols[present] - tp[present])
    fg = iou[1:]
    return EvalReport(
        miou=float(np.nanmean(iou)),
        iou=iou,
        gt_pixels=matrix.counts.sum(1),
        miou_no_background=float(np.nanmean(fg)) if (~np.isnan(fg)).any() else float("nan"),
        class_names=list(class_names) if class_names is not None else [],
        train_images=None if train_images is None else np.asarray(train_images))


def window_origins(length: int, crop: int, stride: int) -> list[int]:
    """Window starts covering [0, length); the last window is shifted back to end at ``length``."""
    if stride > crop:
        raise ValueError(f"stride {stride} exceeds crop {crop}")
    n = max(length - crop + stride - 1, 0) // stride + 1
    return sorted({max(min(i * stride + crop, length) - crop, 0) for i in range(n)})


@torch.no_grad()
def sliding_logits(model, image: torch.Tensor, crop: int, stride: int, num_classes: int) -> torch.Tensor:
    """Coverage-averaged logits C x H x W for a 3 x H x W image."""
    _, h, w = image.shape
    ph, pw = max(crop - h, 0), max(crop - w, 0)
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph))
    hh, ww = image.shape[-2:]
    acc = torch.zeros(num_classes, hh, ww)
    count = torch.zeros(1, hh, ww)
    for y in window_origins(hh, crop, stride):
        for x in window_origins(ww, crop, stride):
            win = image[:, y:y + crop, x:x + crop]
            acc[:, y:y + crop, x:x + crop] += model(win[None])[0]
            count[:, y:y + crop, x:x + crop] += 1
    return (acc / count)[:, :h, :w]


def predict_sliding(model, image: torch.Tensor, crop: int, stride: int | None = None,
                    num_classes: int | None = None) -> torch.Tensor:
    """Argmax mask from sliding-window inference (default stride two thirds of ``crop``)."""
    stride = stride or max(1, (2 * crop) // 3)
    if num_classes is None:
        num_classes = model.num_classes
    return sliding_logits(model, image, crop, stride, num_classes).argmax(0)


@torch.no_grad()
def predict_whole(model, image: torch.Tensor, size: int) -> torch.Tensor:
    """Resize to ``size`` x ``size``, forward once, resize logits back."""
    h, w = image.shape[-2:]
    x = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)
    logits = F.interpolate(model(x), size=(h, w), mode="bilinear", align_corners=False)
    return logits[0].argmax(0)


def evaluate_dataset(model, manifest: DatasetManifest, crop: int, stride: int | None = None,
                     mode: str = "slide", norm: AugmentConfig | None = None,
                     frequency: ClassFrequencyReport | None = None) -> EvalReport:
    """Accumulate a confusion matrix over ``manifest`` and reduce it to an :class:`EvalReport`."""
    if getattr(model, "num_classes", manifest.num_classes) != manifest.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes, dataset has {manifest.num_classes}")
    norm = norm or AugmentConfig()
    was_training = model.training
    model.eval()
    matrix = ConfusionMatrix(manifest.num_classes)
    try:
        for sample in manifest:
            image = to_tensor(normalize(sample.image, norm))
            if mode == "slide":
                pred = predict_sliding(model, image, crop, stride, manifest.num_classes)
            elif mode == "whole":
                pred = predict_whole(model, image, crop)
            else:
                raise ValueError(f"unknown inference mode {mode!r}")
            matrix.update(pred.numpy(), sample.mask)
    finally:
        model.train(was_training)
    train_images = frequency.train_images if frequency is not None else None
    return miou(matrix, manifest.class_names, train_images)
