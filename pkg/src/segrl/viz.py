"""Visualization: mask colorization, overlays, error maps, training curves.

The overlay palette is fixed and documented (below) so emitted images are
stable across runs and safe to use as golden files. It is intentionally
high-saturation and distinct from the muted colors the synthetic renderer
paints into the input images.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# class id -> overlay RGB (uint8); index 0 is background
OVERLAY_PALETTE = np.array([
    [0, 0, 0],         # 0 background
    [230, 25, 75],     # 1 red
    [60, 100, 255],    # 2 blue
    [255, 225, 25],    # 3 yellow
    [60, 180, 75],     # 4 green
    [145, 30, 180],    # 5 purple
    [245, 130, 48],    # 6 orange
    [70, 240, 240],    # 7 cyan
], dtype=np.uint8)

ERROR_COLORS = {
    "false_positive": np.array([255, 64, 64], dtype=np.uint8),
    "false_negative": np.array([64, 64, 255], dtype=np.uint8),
    "class_confused": np.array([255, 210, 40], dtype=np.uint8),
}


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    """Class-id mask -> (H, W, 3) uint8 via the fixed overlay palette."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= len(OVERLAY_PALETTE):
        raise ValueError(
            f"mask values must lie in [0, {len(OVERLAY_PALETTE)}) for colorization")
    return OVERLAY_PALETTE[mask]


def overlay_mask(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blends the colorized mask onto a float RGB image; background untouched.

    Returns float32 in [0, 1], same height/width as the input image.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[:2] != np.asarray(mask).shape:
        raise ShapeError(
            f"image {image.shape[:2]} and mask {np.asarray(mask).shape} sizes differ")
    colors = colorize_mask(mask).astype(np.float32) / 255.0
    fg = (np.asarray(mask) > 0)[:, :, None]
    return np.where(fg, (1.0 - alpha) * image + alpha * colors, image)


def error_counts(pred: np.ndarray, gt: np.ndarray) -> dict[str, int]:
    """Pixel tallies matching the error-map colors.

    Foreground is any class > 0. false_positive: predicted foreground on
    true background; false_negative: predicted background on true
    foreground; class_confused: foreground in both but the wrong class.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    return {
        "false_positive": int(np.count_nonzero((pred > 0) & (gt == 0))),
        "false_negative": int(np.count_nonzero((pred == 0) & (gt > 0))),
        "class_confused": int(np.count_nonzero((pred > 0) & (gt > 0) & (pred != gt))),
    }


def error_map(pred: np.ndarray, gt: np.ndarray,
              image: np.ndarray | None = None) -> np.ndarray:
    """False-positive / false-negative visualization as a float RGB image.

    Correct pixels show the (dimmed) input image when given, else black.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    h, w = pred.shape
    if image is not None:
        base = 0.35 * np.asarray(image, dtype=np.float32)
    else:
        base = np.zeros((h, w, 3), dtype=np.float32)
    out = base.copy()
    regions = {
        "false_positive": (pred > 0) & (gt == 0),
        "false_negative": (pred == 0) & (gt > 0),
        "class_confused": (pred > 0) & (gt > 0) & (pred != gt),
    }
    for name, region in regions.items():
        out[region] = ERROR_COLORS[name].astype(np.float32) / 255.0
    return out


def save_training_curves(history, out_dir) -> list[str]:
    """Writes loss, validation-metric, and curriculum curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import os

    os.makedirs(out_dir, exist_ok=True)
    epochs = history.epochs
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, history.l_seg, label="L_seg")
    ax.plot(epochs, history.l_rl, label="L_RL")
    ax.plot(epochs, history.l_total, label="L_total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, history.val_miou, label="val mIoU")
    ax.plot(epochs, history.val_dice, label="val Dice")
    ax.set_xlabel("epoch")
    ax.set_ylabel("metric")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.set_title("validation metrics")
    path = os.path.join(out_dir, "val_metrics.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, history.f_epoch, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("f_epoch")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("curriculum weighting factor")
    path = os.path.join(out_dir, "curriculum.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)
    return paths
