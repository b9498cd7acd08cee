"""Segmentation evaluation metrics: per-class IoU, mean IoU, Dice.

Counts are accumulated into a K x K confusion matrix (rows = ground truth,
columns = prediction) so that evaluation can fan out over workers and merge:
matrix addition is associative and commutative. Classes that never occur in
either prediction or ground truth (tp + fp + fn == 0) are treated as absent
and excluded from all means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ConfusionCounts:
    """Pixel confusion counts over one or more (pred, gt) mask pairs."""

    def __init__(self, num_classes: int, matrix: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        if matrix is None:
            matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        elif matrix.shape != (num_classes, num_classes):
            raise ValueError(f"matrix shape {matrix.shape} != ({num_classes}, {num_classes})")
        self.matrix = matrix
        self.num_samples = 0

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - np.diag(self.matrix)

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - np.diag(self.matrix)

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero((self.tp + self.fp + self.fn) > 0)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        out = ConfusionCounts(self.num_classes, self.matrix + other.matrix)
        out.num_samples = self.num_samples + other.num_samples
        return out

    def __add__(self, other):
        return self.merge(other)


def accumulate(counts: ConfusionCounts, pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Adds exact pixel confusion counts of one (pred, gt) pair to ``counts``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    k = counts.num_classes
    if pred.max(initial=0) >= k or gt.max(initial=0) >= k:
        raise ValueError(f"mask values must be < {k}")
    if pred.min(initial=0) < 0 or gt.min(initial=0) < 0:
        raise ValueError("mask values must be >= 0")
    flat = k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    counts.matrix += np.bincount(flat, minlength=k * k).reshape(k, k)
    counts.num_samples += 1
    return counts


def iou_per_class(counts: ConfusionCounts) -> dict[int, float]:
    """IoU_c = tp / (tp + fp + fn); absent classes are omitted from the map."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    out = {}
    for c in counts.present_classes():
        denom = tp[c] + fp[c] + fn[c]
        out[int(c)] = float(tp[c] / denom)
    return out


def dice_per_class(counts: ConfusionCounts) -> dict[int, float]:
    """Dice_c = 2 tp / (2 tp + fp + fn); absent classes omitted."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    out = {}
    for c in counts.present_classes():
        out[int(c)] = float(2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]))
    return out


def mean_iou(per_class: dict[int, float]) -> float:
    """Unweighted mean over the non-absent classes; NaN for an empty map."""
    if not per_class:
        return float("nan")
    return float(sum(per_class.values()) / len(per_class))


def dice_coefficient(counts: ConfusionCounts) -> float:
    """Unweighted mean of per-class Dice over non-absent classes."""
    per_class = dice_per_class(counts)
    if not per_class:
        return float("nan")
    return float(sum(per_class.values()) / len(per_class))


@dataclass
class MetricsReport:
    per_class_iou: dict[int, float]
    mean_iou: float
    dice: float
    num_samples: int
    per_class_dice: dict[int, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "dice": self.dice,
            "num_samples": self.num_samples,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "per_class_dice": {str(k): v for k, v in sorted(self.per_class_dice.items())},
        }

    def to_text_table(self, class_names: dict[int, str] | None = None) -> str:
        """Aligned per-class table plus the overall means."""
        names = class_names or {}
        rows = [("class", "IoU", "Dice")]
        for c in sorted(self.per_class_iou):
            label = names.get(c, f"class {c}")
            rows.append((label, f"{self.per_class_iou[c]:.4f}",
                         f"{self.per_class_dice.get(c, float('nan')):.4f}"))
        rows.append(("mean", f"{self.mean_iou:.4f}", f"{self.dice:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
            if i == 0 or i == len(rows) - 2:
                lines.append("-" * (sum(widths) + 4))
        return "\n".join(lines)

    def save(self, json_path, text_path=None):
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text_table() + "\n")


def report_from_counts(counts: ConfusionCounts) -> MetricsReport:
    per_iou = iou_per_class(counts)
    return MetricsReport(
        per_class_iou=per_iou,
        mean_iou=mean_iou(per_iou),
        dice=dice_coefficient(counts),
        num_samples=counts.num_samples,
        per_class_dice=dice_per_class(counts),
    )


def evaluate_pairs(pairs, num_classes: int, mode: str = "dataset") -> MetricsReport:
    """Evaluates (pred, gt) mask pairs.

    ``dataset`` accumulates one confusion tally over all pairs (the challenge
    convention); ``per_image`` scores each pair separately and averages the
    resulting mIoU/Dice over images.
    """
    if mode == "dataset":
        counts = ConfusionCounts(num_classes)
        for pred, gt in pairs:
            accumulate(counts, pred, gt)
        return report_from_counts(counts)
    if mode == "per_image":
        ious, dices = [], []
        n = 0
        for pred, gt in pairs:
            counts = accumulate(ConfusionCounts(num_classes), pred, gt)
            ious.append(mean_iou(iou_per_class(counts)))
            dices.append(dice_coefficient(counts))
            n += 1
        if n == 0:
            raise ValueError("no pairs to evaluate")
        return MetricsReport(
            per_class_iou={},
            mean_iou=float(np.mean(ious)),
            dice=float(np.mean(dices)),
            num_samples=n,
        )
    raise ValueError(f"unknown mode {mode!r}")
