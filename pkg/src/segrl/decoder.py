"""Multi-stage 2x upsampling decoder producing per-pixel class logits.

Each stage is a kernel-2 stride-2 transposed convolution (exact doubling,
no padding ambiguity), an optional skip-feature merge by channel
concatenation, and a refinement block of two 3x3 convolutions each followed
by a ReLU. A final 1x1 convolution maps to the class logits; softmax over
the class axis turns those into per-pixel probabilities.

The class axis is axis 0 for the single-sample ``decode`` path (K, H, W)
and axis 1 for the batched ``forward``/``backward`` path (N, K, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeatureMap
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvTranspose2x2, ReLU, bilinear_resize_nhwc, stable_softmax

CHANNEL_FLOOR = 16


def _halving_schedule(in_dim: int, num_stages: int) -> tuple[int, ...]:
    # halve per stage, but keep late (high-resolution) stages at least a
    # quarter of the fused width so fine structures retain capacity
    floor = max(CHANNEL_FLOOR, in_dim // 4)
    channels = []
    c = in_dim
    for _ in range(num_stages):
        c = max(c // 2, floor)
        channels.append(c)
    return tuple(channels)


@dataclass(frozen=True)
class DecoderConfig:
    grid_size: int
    image_side: int
    in_dim: int
    num_classes: int
    channels: tuple[int, ...] | None = None
    skip_dim: int = 0  # channels of every skip feature map; 0 disables merging

    def __post_init__(self):
        if self.grid_size < 1 or self.image_side < 2:
            raise ConfigError("grid_size and image_side must be positive")
        ratio, stages = self.image_side, 0
        ratio = self.image_side // self.grid_size
        if self.grid_size * ratio != self.image_side or ratio < 2 or ratio & (ratio - 1):
            raise ConfigError(
                f"image side {self.image_side} must be grid size {self.grid_size} "
                f"times a power of two >= 2")
        stages = ratio.bit_length() - 1
        object.__setattr__(self, "num_stages", stages)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_dim < 1 or self.skip_dim < 0:
            raise ConfigError("in_dim must be >= 1 and skip_dim >= 0")
        if self.channels is None:
            object.__setattr__(self, "channels",
                               _halving_schedule(self.in_dim, stages))
        else:
            channels = tuple(int(c) for c in self.channels)
            if len(channels) != stages:
                raise ConfigError(
                    f"channels has {len(channels)} entries but the grid-to-image "
                    f"ratio implies {stages} stages")
            if any(c < 1 for c in channels):
                raise ConfigError("all stage channel counts must be positive")
            object.__setattr__(self, "channels", channels)

    num_stages: int = 0  # filled in by __post_init__


@dataclass
class LogitMap:
    """Pre-softmax class scores, (K, H, W)."""

    scores: np.ndarray

    def __post_init__(self):
        if self.scores.ndim != 3:
            raise ShapeError(f"logit map must be (K, H, W), got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("logit map contains non-finite values")


@dataclass
class ProbMap:
    """Per-pixel class distribution, (K, H, W); class axis sums to 1."""

    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 3:
            raise ShapeError(f"probability map must be (K, H, W), got {p.shape}")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        sums = p.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("per-pixel class probabilities must sum to 1")


def softmax_pixelwise(logits) -> ProbMap:
    """Max-subtracted softmax over the class axis of a (K, H, W) logit map."""
    scores = logits.scores if isinstance(logits, LogitMap) else np.asarray(logits)
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax_pixelwise requires finite logits")
    return ProbMap(probs=stable_softmax(scores, axis=0))


class Decoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        self.tconvs = []
        self.refines = []  # per stage: (conv1, relu1, conv2, relu2)
        c_in = config.in_dim
        for s, c_out in enumerate(config.channels):
            self.tconvs.append(
                ConvTranspose2x2(c_in, c_out, rng=rng, name=f"decoder.stage{s}.up"))
            merged = c_out + config.skip_dim
            self.refines.append((
                Conv2d(merged, c_out, 3, rng=rng, name=f"decoder.stage{s}.refine1"),
                ReLU(),
                Conv2d(c_out, c_out, 3, rng=rng, name=f"decoder.stage{s}.refine2"),
                ReLU(),
            ))
            c_in = c_out
        # zero head: logits start exactly at 0 (uniform class probabilities),
        # so early training is driven by well-conditioned loss gradients
        # instead of fighting a random readout
        self.head = Conv2d(c_in, config.num_classes, 1, zero_init=True,
                           name="decoder.head")

    def params(self):
        out = []
        for tconv, (c1, _, c2, _) in zip(self.tconvs, self.refines):
            out += tconv.params() + c1.params() + c2.params()
        return out + self.head.params()

    # ---- batched training path ----------------------------------------

    def upsample_stage(self, x: np.ndarray, stage_index: int,
                       skip: np.ndarray | None = None) -> np.ndarray:
        """One stage on an (N, H, W, C) tensor; returns (N, 2H, 2W, C')."""
        if not 0 <= stage_index < self.config.num_stages:
            raise ShapeError(
                f"stage_index {stage_index} out of range "
                f"[0, {self.config.num_stages})")
        tconv = self.tconvs[stage_index]
        if x.shape[3] != tconv.in_ch:
            raise ShapeError(
                f"stage {stage_index} expects {tconv.in_ch} channels, got {x.shape[3]}")
        up = tconv.forward(x)
        if self.config.skip_dim:
            if skip is None:
                raise ShapeError(f"stage {stage_index} requires a skip feature")
            if skip.shape[3] != self.config.skip_dim:
                raise ShapeError(
                    f"skip has {skip.shape[3]} channels, configured "
                    f"skip_dim is {self.config.skip_dim}")
            if skip.shape[1:3] != up.shape[1:3]:
                skip = bilinear_resize_nhwc(skip, up.shape[1], up.shape[2])
            up = np.concatenate([up, skip], axis=3)
        conv1, relu1, conv2, relu2 = self.refines[stage_index]
        return relu2.forward(conv2.forward(relu1.forward(conv1.forward(up))))

    def forward(self, fused: np.ndarray, skips: list[np.ndarray] | None = None,
                stage_skips: list[np.ndarray] | None = None) -> np.ndarray:
        """(N, G, G, in_dim) plus skips -> (N, K, side, side) logits.

        Inputs are channels-last; the returned logits put the class axis
        first to match the loss and metric conventions. ``skips`` are
        per-tap grids assigned to stages here (resized on the fly);
        ``stage_skips`` bypasses that with one pre-sized feature per stage,
        which callers use to hoist resizing out of training loops.
        """
        if fused.shape[1] != self.config.grid_size or fused.shape[2] != self.config.grid_size:
            raise ShapeError(
                f"fused grid is {fused.shape[1]}x{fused.shape[2]}, configured "
                f"grid_size is {self.config.grid_size}")
        if stage_skips is not None and len(stage_skips) != self.config.num_stages:
            raise ShapeError(
                f"got {len(stage_skips)} stage skips for "
                f"{self.config.num_stages} stages")
        skips = skips or []
        x = fused
        for s in range(self.config.num_stages):
            skip = stage_skips[s] if stage_skips is not None \
                else self._skip_for_stage(skips, s)
            x = self.upsample_stage(x, s, skip)
        out = self.head.forward(x)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _skip_for_stage(self, skips: list[np.ndarray], stage: int):
        """Deepest tap feeds the first stage, shallower taps the later ones."""
        if not self.config.skip_dim or not skips:
            return None
        return skips[max(len(skips) - 2 - stage, 0)]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backprop through head and all stages; skip gradients are dropped
        because everything upstream of the skips is frozen.

        Takes (N, K, side, side) loss gradients, returns the channels-last
        (N, G, G, in_dim) gradient at the fused input.
        """
        dx = self.head.backward(np.ascontiguousarray(dlogits.transpose(0, 2, 3, 1)))
        for s in reversed(range(self.config.num_stages)):
            conv1, relu1, conv2, relu2 = self.refines[s]
            dup = relu1.backward(conv2.backward(relu2.backward(dx)))
            dx = conv1.backward(
                dup, dx_channels=self.tconvs[s].out_ch if self.config.skip_dim else None)
            dx = self.tconvs[s].backward(dx)
        return dx

    # ---- single-sample convenience -------------------------------------

    def decode(self, f_fused: FeatureMap, skips: list[FeatureMap] | None = None) -> LogitMap:
        """Full decode of one fused (G, G, C) feature map to (K, side, side)."""
        skip_arrays = None
        if skips is not None:
            skip_arrays = [np.ascontiguousarray(fm.grid)[None] for fm in skips]
        logits = self.forward(np.ascontiguousarray(f_fused.grid)[None], skip_arrays)
        return LogitMap(scores=logits[0])
