"""Synthetic "surgical scene" dataset: generation, splitting, and file IO.

Scenes are square RGB images with a per-pixel integer class mask:

* class 0 - textured background (always present),
* class 1 - one or two elliptical "organ" blobs,
* class 2 - one or two elongated polygonal "instruments" (shaft + tip),
* class 3 - a thin thread-like curve (only when ``num_classes >= 4``),
* classes 4+ - additional small blobs, one color family per class.

Each class is rendered in its own color family with per-sample jitter,
multiplicative illumination, and pixel noise, so per-pixel classification is
learnable but not trivial. Generation is a pure function of
``(config.seed, index)``: all randomness flows through a
``numpy.random.Generator`` (PCG64) seeded with ``SeedSequence((seed, index))``,
which numpy documents as reproducible across platforms.

On-disk formats:

* masks - single-channel 8-bit PNG, pixel value == class id (lossless);
* images - 8-bit RGB PNG;
* manifest - UTF-8 text, one ``image_path<TAB>mask_path<TAB>sample_id`` per line.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataIOError
from .nn import bilinear_resize_hwc

# Rendering color families (RGB in [0,1]), indexed by class id. Chosen to be
# well separated so the segmentation task is solvable from color + context.
CLASS_COLORS = np.array([
    [0.36, 0.29, 0.25],   # 0 background: dark warm brown
    [0.67, 0.29, 0.32],   # 1 organ: muted red
    [0.58, 0.65, 0.74],   # 2 instrument: cold steel
    [0.93, 0.86, 0.30],   # 3 thread: bright yellow
    [0.22, 0.62, 0.55],   # 4 teal blob
    [0.55, 0.36, 0.68],   # 5 violet blob
    [0.78, 0.52, 0.25],   # 6 amber blob
    [0.30, 0.45, 0.72],   # 7 blue blob
])


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _entropy(*parts: int) -> tuple[int, ...]:
    # SeedSequence wants non-negative ints; map signed seeds into uint64
    return tuple(int(p) & 0xFFFFFFFFFFFFFFFF for p in parts)


@dataclass(frozen=True)
class DatasetConfig:
    """Parameters of the synthetic dataset.

    ``height``/``width`` must be equal powers of two: the decoder reconstructs
    the image resolution by repeated exact doubling from the encoder grid.
    """

    num_samples: int
    height: int = 64
    width: int = 64
    num_classes: int = 4
    seed: int = 0
    thin_structure_width: int = 1

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if self.height != self.width:
            raise ConfigError(f"height ({self.height}) must equal width ({self.width})")
        if not _is_pow2(self.height):
            raise ConfigError(f"image side must be a power of two, got {self.height}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.thin_structure_width < 1:
            raise ConfigError("thin_structure_width must be >= 1")


@dataclass
class SceneSample:
    """One image/mask pair. image: (H, W, 3) float32 in [0,1]; mask: (H, W) uint8."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def validate(self, num_classes: int | None = None):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} sizes differ")
        if num_classes is not None and self.mask.max(initial=0) >= num_classes:
            raise ValueError("mask contains class ids >= num_classes")
        if not (self.mask == 0).any():
            raise ValueError("background (class 0) must cover at least one pixel")


def _coarse_field(rng: np.random.Generator, side: int, cells: int, amplitude: float) -> np.ndarray:
    grid = rng.uniform(-amplitude, amplitude, size=(cells, cells))
    return bilinear_resize_hwc(grid, side, side)


def _rotated_box(yy, xx, cy, cx, theta, half_len, half_wid):
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    return (np.abs(u) <= half_len) & (np.abs(v) <= half_wid), u, v


def _triangle(yy, xx, p0, p1, p2):
    def edge(a, b):
        return (xx - a[1]) * (b[0] - a[0]) - (yy - a[0]) * (b[1] - a[1])

    d0, d1, d2 = edge(p0, p1), edge(p1, p2), edge(p2, p0)
    has_neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    has_pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(has_neg & has_pos)


def _paint(color, mask, region, class_id, rgb, shading=None):
    for ch in range(3):
        color[:, :, ch] = np.where(region, rgb[ch], color[:, :, ch])
    if shading is not None:
        color[region] *= shading[region, None]
    mask[region] = class_id


def _jitter(rng: np.random.Generator, base: np.ndarray, scale: float = 0.04) -> np.ndarray:
    return np.clip(base + rng.uniform(-scale, scale, size=3), 0.02, 0.98)


def _draw_scene(rng: np.random.Generator, cfg: DatasetConfig):
    side = cfg.height
    k = cfg.num_classes
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    # background: base family + coarse texture + fine grain
    color = np.empty((side, side, 3), dtype=np.float64)
    base = _jitter(rng, CLASS_COLORS[0])
    coarse = _coarse_field(rng, side, max(3, side // 8), 0.05)
    for ch in range(3):
        color[:, :, ch] = base[ch] + coarse
    mask = np.zeros((side, side), dtype=np.uint8)

    # organs (class 1): large soft-shaded ellipses
    n_organs = 1 + int(rng.random() < 0.4)
    for _ in range(n_organs):
        cy, cx = rng.uniform(0.25 * side, 0.75 * side, size=2)
        ry = rng.uniform(0.11, 0.22) * side
        rx = rng.uniform(0.11, 0.22) * side
        theta = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        rho2 = (u / rx) ** 2 + (v / ry) ** 2
        region = rho2 <= 1.0
        shading = 1.0 - 0.22 * rho2
        _paint(color, mask, region, 1, _jitter(rng, CLASS_COLORS[1]), shading)

    # extra blob classes (4..K-1): small flat ellipses
    for cls in range(4, k):
        cy, cx = rng.uniform(0.15 * side, 0.85 * side, size=2)
        r = rng.uniform(0.05, 0.11) * side
        region = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        rgb = CLASS_COLORS[4 + (cls - 4) % (len(CLASS_COLORS) - 4)]
        _paint(color, mask, region, cls, _jitter(rng, rgb))

    # instruments (class 2): rotated shaft rectangle plus a triangular tip
    if k >= 3:
        n_instr = 1 + int(rng.random() < 0.35)
        for _ in range(n_instr):
            cy, cx = rng.uniform(0.3 * side, 0.7 * side, size=2)
            theta = rng.uniform(0, math.pi)
            half_len = rng.uniform(0.18, 0.34) * side
            half_wid = rng.uniform(0.025, 0.05) * side
            box, _, v = _rotated_box(yy, xx, cy, cx, theta, half_len, half_wid)
            ey = cy + half_len * math.sin(theta)
            ex = cx + half_len * math.cos(theta)
            tip_len = 0.5 * half_wid + 0.08 * side
            apex = (ey + tip_len * math.sin(theta), ex + tip_len * math.cos(theta))
            b0 = (ey + half_wid * math.cos(theta), ex - half_wid * math.sin(theta))
            b1 = (ey - half_wid * math.cos(theta), ex + half_wid * math.sin(theta))
            region = box | _triangle(yy, xx, apex, b0, b1)
            # specular stripe along the shaft axis
            shading = 1.0 + 0.18 * np.clip(1.0 - np.abs(v) / max(half_wid, 1e-9), 0.0, 1.0)
            _paint(color, mask, region, 2, _jitter(rng, CLASS_COLORS[2]), shading)

    # threads (class 3): thin quadratic Bezier curves
    if k >= 4:
        for _ in range(2 + int(rng.random() < 0.5)):
            pts = rng.uniform(0.1 * side, 0.9 * side, size=(3, 2))
            t = np.linspace(0.0, 1.0, 6 * side)[:, None]
            curve = ((1 - t) ** 2 * pts[0] + 2 * t * (1 - t) * pts[1] + t ** 2 * pts[2])
            rows = np.clip(np.rint(curve[:, 0]).astype(np.int64), 0, side - 1)
            cols = np.clip(np.rint(curve[:, 1]).astype(np.int64), 0, side - 1)
            region = np.zeros((side, side), dtype=bool)
            w = cfg.thin_structure_width
            for dy in range(-(w // 2), w - w // 2):
                for dx in range(-(w // 2), w - w // 2):
                    region[np.clip(rows + dy, 0, side - 1),
                           np.clip(cols + dx, 0, side - 1)] = True
            _paint(color, mask, region, 3, _jitter(rng, CLASS_COLORS[3]))

    illum = 1.0 + _coarse_field(rng, side, 3, 0.12)
    noise = rng.normal(0.0, 0.03, size=color.shape)
    image = np.clip(color * illum[:, :, None] + noise, 0.0, 1.0).astype(np.float32)
    return image, mask


def generate_scene(config: DatasetConfig, index: int) -> SceneSample:
    """Generates sample ``index``; bit-identical for the same (seed, index)."""
    if index >= config.num_samples or index < 0:
        raise ValueError(f"index {index} out of range [0, {config.num_samples})")
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(config.seed, index)))
    required = [c for c in (1, 2, 3) if c < config.num_classes]
    for _ in range(4):
        image, mask = _draw_scene(rng, config)
        if all((mask == c).any() for c in required) and (mask == 0).any():
            sample = SceneSample(id=f"scene{index:05d}", image=image, mask=mask)
            sample.validate(config.num_classes)
            return sample
    raise RuntimeError(f"could not place all classes for sample {index}")


def generate_dataset(config: DatasetConfig) -> list[SceneSample]:
    return [generate_scene(config, i) for i in range(config.num_samples)]


def split_dataset(samples: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split; validation gets round(val_fraction * N).

    Rounding is half-up. The two halves are disjoint and their union is the
    input (as sets of elements).
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(samples)
    n_val = int(math.floor(val_fraction * n + 0.5))
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(seed)))
    perm = rng.permutation(n)
    val = [samples[i] for i in perm[:n_val]]
    train = [samples[i] for i in perm[n_val:]]
    return train, val


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def save_mask(mask: np.ndarray, path: str | os.PathLike):
    """Writes a class-id mask as a single-channel 8-bit PNG (pixel = class id)."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"mask must be integer-typed, got {arr.dtype}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("mask class ids must fit in 8 bits (0..255)")
    try:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write mask to {path}: {exc}") from exc


def load_mask(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataIOError(f"{path}: expected single-channel mask, got mode {img.mode}")
            return np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        if isinstance(exc, DataIOError):
            raise
        raise DataIOError(f"cannot read mask from {path}: {exc}") from exc


def save_image(image: np.ndarray, path: str | os.PathLike):
    """Writes a float RGB image in [0,1] as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {arr.shape}")
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(quantized, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write image to {path}: {exc}") from exc


def load_image(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    """Loads an RGB image as float32 in [0,1]; optionally bilinear-resizes to size (H, W)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataIOError(f"cannot read image from {path}: {exc}") from exc
    if size is not None and arr.shape[:2] != tuple(size):
        arr = bilinear_resize_hwc(arr, size[0], size[1]).astype(np.float32)
    return arr


def write_manifest(path: str | os.PathLike, entries: list[tuple[str, str, str]]):
    """Writes (image_path, mask_path, sample_id) triples, tab-separated, one per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, mask_path, sample_id in entries:
            fh.write(f"{image_path}\t{mask_path}\t{sample_id}\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, str]]:
    entries = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataIOError(
                        f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                entries.append((parts[0], parts[1], parts[2]))
    except OSError as exc:
        if isinstance(exc, DataIOError):
            raise
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    return entries
