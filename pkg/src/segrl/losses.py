"""Segmentation losses, curriculum weighting, and the hybrid total loss.

Public single-sample operations take per-pixel class probabilities (the
output of the pixelwise softmax). The trainer uses
:func:`seg_loss_and_grad`, which starts from raw logits and returns the loss
together with its exact analytic gradient with respect to those logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import stable_softmax

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the cross-entropy and Dice terms."""

    ce: float = 1.0
    dice: float = 1.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0 or self.dice_smooth < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ce + self.dice == 0:
            raise ValueError("at least one of ce/dice weight must be positive")


@dataclass(frozen=True)
class CurriculumState:
    """Epoch position within training and the derived loss-weighting factor."""

    epoch_current: int
    epoch_total: int

    def __post_init__(self):
        curriculum_factor(self.epoch_current, self.epoch_total)  # validates

    @property
    def f_epoch(self) -> float:
        return curriculum_factor(self.epoch_current, self.epoch_total)


def curriculum_factor(epoch_current: int, epoch_total: int) -> float:
    """Quadratic decay (1 - e/T)^2 from 1 at e=0 to 0 at e=T."""
    if epoch_total < 1:
        raise ValueError(f"epoch_total must be >= 1, got {epoch_total}")
    if epoch_current < 0 or epoch_current > epoch_total:
        raise ValueError(
            f"epoch_current must be in [0, {epoch_total}], got {epoch_current}")
    ratio = epoch_current / epoch_total
    return (1.0 - ratio) ** 2


def total_loss(l_seg: float, l_rl: float, f_epoch: float) -> float:
    """Affine blend f * L_seg + (1 - f) * L_RL; endpoints are exact."""
    if not 0.0 <= f_epoch <= 1.0:
        raise ValueError(f"f_epoch must be in [0, 1], got {f_epoch}")
    if f_epoch == 1.0:
        return l_seg
    if f_epoch == 0.0:
        return l_rl
    return f_epoch * l_seg + (1.0 - f_epoch) * l_rl


def _check_probs_gt(probs: np.ndarray, gt: np.ndarray):
    if probs.ndim != 3:
        raise ValueError(f"probs must be (K, H, W), got shape {probs.shape}")
    if gt.shape != probs.shape[1:]:
        raise ValueError(f"gt shape {gt.shape} does not match probs {probs.shape}")
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= probs.shape[0]:
        raise ValueError(f"gt contains class ids outside [0, {probs.shape[0]})")


def cross_entropy(probs: np.ndarray, gt: np.ndarray) -> float:
    """Mean over pixels of -ln p(correct class), with the log clamped at 1e-12."""
    _check_probs_gt(probs, gt)
    picked = np.take_along_axis(probs, gt[None].astype(np.int64), axis=0)[0]
    return float(np.mean(-np.log(np.maximum(picked, LOG_CLAMP))))


def dice_loss(probs: np.ndarray, gt: np.ndarray, smooth: float = 1.0) -> float:
    """Soft Dice loss: 1 - mean over all K classes of the smoothed Dice score.

    The smoothing term makes a class that is absent from both the ground
    truth and the prediction score ~1, so absent classes do not dominate.
    """
    _check_probs_gt(probs, gt)
    k = probs.shape[0]
    onehot = (gt[None] == np.arange(k)[:, None, None]).astype(probs.dtype)
    inter = (probs * onehot).sum(axis=(1, 2))
    denom = probs.sum(axis=(1, 2)) + onehot.sum(axis=(1, 2))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return float(1.0 - dice.mean())


def seg_loss(probs: np.ndarray, gt: np.ndarray, weights: LossWeights) -> float:
    """w_ce * cross-entropy + w_dice * Dice loss."""
    return (weights.ce * cross_entropy(probs, gt)
            + weights.dice * dice_loss(probs, gt, weights.dice_smooth))


def seg_loss_and_grad(logits: np.ndarray, gt: np.ndarray, weights: LossWeights):
    """Segmentation loss on a batch of logits plus d(loss)/d(logits).

    Arguments:
        logits: (N, K, H, W) raw class scores.
        gt: (N, H, W) integer class ids.
        weights: loss term weights.

    Returns:
        (loss, ce, dice, probs, dlogits) where loss/ce/dice are batch means,
        probs is the pixelwise softmax of the logits and dlogits has the
        same shape as logits. The clamp inside the log only affects the
        forward value in the p -> 0 extreme; the gradient is the standard
        unclamped softmax cross-entropy form.
    """
    if logits.ndim != 4:
        raise ValueError(f"logits must be (N, K, H, W), got shape {logits.shape}")
    n, k, h, w = logits.shape
    if gt.shape != (n, h, w):
        raise ValueError(f"gt shape {gt.shape} does not match logits {logits.shape}")
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= k:
        raise ValueError(f"gt contains class ids outside [0, {k})")
    probs = stable_softmax(logits, axis=1)
    onehot = (gt[:, None] == np.arange(k)[None, :, None, None]).astype(logits.dtype)
    pixels = h * w

    picked = np.take_along_axis(probs, gt[:, None].astype(np.int64), axis=1)[:, 0]
    ce = float(np.mean(-np.log(np.maximum(picked, LOG_CLAMP))))
    dz = (weights.ce / (n * pixels)) * (probs - onehot)

    eps = weights.dice_smooth
    inter = (probs * onehot).sum(axis=(2, 3))                      # (N, K)
    area = probs.sum(axis=(2, 3)) + onehot.sum(axis=(2, 3)) + eps  # (N, K)
    dice_score = (2.0 * inter + eps) / area
    dice = float((1.0 - dice_score.mean(axis=1)).mean())
    if weights.dice != 0.0:
        # d(1 - mean_c D_c)/dP through the per-class sums, then through softmax
        dp = (-weights.dice / (n * k)) * (
            (2.0 * onehot - dice_score[:, :, None, None]) / area[:, :, None, None])
        dz = dz + probs * (dp - (dp * probs).sum(axis=1, keepdims=True))

    loss = weights.ce * ce + weights.dice * dice
    return loss, ce, dice, probs, dz
