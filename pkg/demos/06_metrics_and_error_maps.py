"""Segmentation metrics from confusion counts, plus error visualization.

IoU and Dice are both derived from one pooled confusion matrix; classes that
appear in neither prediction nor ground truth are excluded from the means
rather than scored as free wins. The same counts drive the false-positive /
false-negative maps the CLI writes next to each prediction.

Run from the repository root:  python3 demos/06_metrics_and_error_maps.py
"""

import os

import numpy as np

from segrl.dataset import DatasetConfig, generate_scene, save_image
from segrl.metrics import (
    ConfusionCounts,
    accumulate,
    dice_per_class,
    evaluate_pairs,
    iou_per_class,
    report_from_counts,
)
from segrl.viz import error_counts, error_map

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

sample = generate_scene(DatasetConfig(num_samples=1, seed=3), 0)
gt = sample.mask.astype(np.int64)

# fake a prediction by shifting the ground truth two pixels right: plenty of
# boundary errors, zero systematic class confusion
pred = np.zeros_like(gt)
pred[:, 2:] = gt[:, :-2]

counts = ConfusionCounts(num_classes=4)
accumulate(counts, pred, gt)
print("per-class scores for a 2-pixel shift of the truth:")
print(f"{'class':>6}  {'IoU':>7}  {'Dice':>7}")
iou = iou_per_class(counts)
dice = dice_per_class(counts)
for c in sorted(iou):
    print(f"{c:>6}  {iou[c]:>7.4f}  {dice[c]:>7.4f}")

report = report_from_counts(counts)
print(f"mean IoU {report.mean_iou:.4f}, mean Dice {report.dice:.4f}")

# Dice and IoU are locked together per class: Dice = 2*IoU / (1 + IoU)
for c in iou:
    assert abs(dice[c] - 2 * iou[c] / (1 + iou[c])) < 1e-12
print("per-class identity Dice = 2*IoU/(1+IoU) holds for every class")

# dataset pooling vs per-image averaging are different summaries
pairs = [(pred, gt), (gt, gt)]
pooled = evaluate_pairs(pairs, num_classes=4, mode="dataset")
averaged = evaluate_pairs(pairs, num_classes=4, mode="per_image")
print(f"\npooled mIoU {pooled.mean_iou:.4f} vs per-image mean {averaged.mean_iou:.4f}")

tallies = error_counts(pred, gt)
print(f"\nerror tallies: {tallies}")
path = os.path.join(OUT, "error_map.png")
save_image(error_map(pred, gt, sample.image), path)
print(f"wrote {path} (red FP, blue FN, yellow wrong-class)")
