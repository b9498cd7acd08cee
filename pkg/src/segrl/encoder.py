"""Frozen feature extractor and multi-depth feature fusion.

The encoder is a stand-in for a large pretrained vision backbone: a patch
embedding followed by a stack of token-mixing blocks whose weights are drawn
once from a seeded generator and then frozen (the arrays are marked
read-only). It follows the token pipeline of a ViT-style encoder: patches
are embedded, a CLS token is prepended, blocks mix tokens, and the CLS token
is discarded before the tokens are rearranged into spatial feature grids.
Nothing in this module ever receives gradient updates; the one trainable
piece, the 1x1 fusion projection, is deliberately separate
(:class:`FuseProjection`).

Weights can instead be loaded from a flat binary tensor container (see
``segrl.tensorio``) via ``weights_source="file:PATH"``, which is how a real
pretrained backbone would be plugged in.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ConfigError, ShapeError
from .nn import Linear, orthogonal_rows

# magnitude of each frozen block's residual update; keeps activations bounded
# while letting early-layer (color) content survive to the deepest taps
MIX_SCALE = 0.5
POS_SCALE = 1.5
# global scale of the frozen patch embedding. Downstream training runs few
# steps at a small fixed learning rate, so trainable weights only ever move
# a little; large frozen activations let those small weights still produce
# decisively large logits.
EMBED_GAIN = 256.0


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    tap_layers: tuple[int, ...] | None = None
    weights_source: str = "seeded:0"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.embed_dim < 4:
            raise ConfigError("embed_dim must be >= 4")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        taps = self.tap_layers
        if taps is None:
            object.__setattr__(self, "tap_layers", tuple(range(self.num_layers)))
        else:
            taps = tuple(int(t) for t in taps)
            if not taps:
                raise ConfigError("tap_layers must be nonempty")
            if any(t < 0 or t >= self.num_layers for t in taps):
                raise ConfigError(f"tap_layers must lie in [0, {self.num_layers})")
            if any(b <= a for a, b in zip(taps, taps[1:])):
                raise ConfigError("tap_layers must be strictly increasing")
            object.__setattr__(self, "tap_layers", taps)
        kind = self.weights_source.split(":", 1)[0]
        if kind not in ("seeded", "file"):
            raise ConfigError(
                f"weights_source must be 'seeded:<int>' or 'file:<path>', "
                f"got {self.weights_source!r}")


@dataclass
class FeatureMap:
    """A (G, G, D) spatial grid of feature vectors from one encoder depth."""

    grid: np.ndarray
    depth_tag: int = -1

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ShapeError(f"feature grid must be (G, G, D), got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("feature grid contains non-finite values")


def drop_cls_and_reshape(tokens: np.ndarray, depth_tag: int = -1) -> FeatureMap:
    """Removes the leading CLS token and lays the rest out row-major on a grid.

    Token i (1-indexed after the CLS) lands at grid cell
    ((i-1) // G, (i-1) % G).
    """
    if tokens.ndim != 2:
        raise ShapeError(f"token sequence must be (T, D), got {tokens.shape}")
    t = tokens.shape[0]
    g = math.isqrt(t - 1) if t >= 2 else 0
    if t < 2 or g * g != t - 1:
        raise ShapeError(
            f"sequence length {t} is not 1 + a positive perfect square")
    return FeatureMap(grid=tokens[1:].reshape(g, g, tokens.shape[1]).copy(),
                      depth_tag=depth_tag)


def global_pool(feature: FeatureMap) -> np.ndarray:
    """Arithmetic mean over all grid positions, per channel."""
    if feature.grid.size == 0:
        raise ShapeError("cannot pool an empty feature grid")
    return feature.grid.mean(axis=(0, 1))


def positional_grid(g: int, dim: int) -> np.ndarray:
    """Deterministic 2-D sinusoidal position code, (G, G, D)."""
    quarter = max(dim // 4, 1)
    freqs = 1.0 / (64.0 ** (np.arange(quarter) / quarter))
    coords = np.arange(g, dtype=np.float64)
    ang = coords[:, None] * freqs[None, :]
    enc_y = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)   # (G, 2q)
    out = np.zeros((g, g, dim), dtype=np.float64)
    out[:, :, :2 * quarter] = enc_y[:, None, :]
    out[:, :, 2 * quarter:4 * quarter] = enc_y[None, :, :]
    return out.astype(np.float32)


def _depthwise3x3(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution on an (N, G, G, D) grid, zero padded."""
    n, g, _, d = grid.shape
    padded = np.pad(grid, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(grid)
    for ki in range(3):
        for kj in range(3):
            out += padded[:, ki:ki + g, kj:kj + g, :] * kernel[ki, kj]
    return out


def _haar_1d(size: int) -> np.ndarray:
    """Orthonormal 1-D Haar matrix (rows coarse to fine); size a power of two."""
    h = np.array([[1.0]])
    while h.shape[0] < size:
        n = h.shape[0]
        avg = np.kron(h, np.array([1.0, 1.0]) / math.sqrt(2.0))
        det = np.kron(np.eye(n), np.array([1.0, -1.0]) / math.sqrt(2.0))
        h = np.concatenate([avg, det], axis=0)
    return h


def _haar_level(index: int) -> int:
    return 0 if index == 0 else index.bit_length()


def _opponent_basis() -> np.ndarray:
    """Orthonormal channel components: luminance, red-green, yellow-blue."""
    return np.array([
        [1.0, 1.0, 1.0] / np.sqrt(3.0),
        [1.0, -1.0, 0.0] / np.sqrt(2.0),
        [1.0, 1.0, -2.0] / np.sqrt(6.0),
    ])


def patch_basis(patch_size: int, embed_dim: int,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """(patch_dim, embed_dim) embedding matrix for flattened p*p*3 patches.

    Columns are orthonormal 2-D Haar atoms ordered coarse to fine: first
    per-channel color atoms down to 2-pixel blocks, then finest-scale atoms
    on opponent channels (luminance first) with horizontal and vertical
    detail interleaved, so single-pixel edges of either orientation stay
    visible after truncation to embed_dim. A random projection instead
    would spread ~2/3 of the within-patch variance outside the retained
    subspace (for patch 8, dim 64) and make thin structures unrecoverable
    downstream. Non-power-of-two patch sizes fall back to a seeded random
    orthogonal projection.
    """
    p = patch_size
    patch_dim = p * p * 3
    if p & (p - 1):
        if rng is None:
            rng = np.random.default_rng(0)
        if patch_dim >= embed_dim:
            return np.ascontiguousarray(
                orthogonal_rows(rng, embed_dim, patch_dim, gain=EMBED_GAIN).T)
        return orthogonal_rows(rng, patch_dim, embed_dim, gain=EMBED_GAIN)
    if embed_dim > patch_dim:
        raise ConfigError(
            f"embed_dim {embed_dim} exceeds patch dimension {patch_dim}")
    h1 = _haar_1d(p)
    top = p.bit_length() - 1
    coarse = sorted(
        (max(_haar_level(i), _haar_level(j)), _haar_level(i) + _haar_level(j), i, j)
        for i in range(p) for j in range(p)
        if max(_haar_level(i), _haar_level(j)) < top)
    fine = sorted(
        (_haar_level(i) + _haar_level(j), max(i, j), min(i, j), i, j)
        for i in range(p) for j in range(p)
        if max(_haar_level(i), _haar_level(j)) == top)
    eye = np.eye(3)
    opponent = _opponent_basis()
    atoms = [(i, j, eye[c]) for _, _, i, j in coarse for c in range(3)]
    atoms += [(i, j, opponent[comp]) for comp in range(3) for _, _, _, i, j in fine]
    basis = np.zeros((patch_dim, embed_dim), dtype=np.float64)
    for col, (i, j, chan) in enumerate(atoms[:embed_dim]):
        vec = np.einsum("a,b->ab", h1[i], h1[j])           # (p, p) separable atom
        basis[:, col] = (vec[:, :, None] * chan).reshape(-1)
    return (EMBED_GAIN * basis).astype(np.float32)


def surrogate_weights(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Fixed weight set: analytic patch basis plus seeded mixing blocks."""
    rng = np.random.default_rng(
        np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, 0xE5C0)))
    d = config.embed_dim
    weights = {"patch_embed.weight": patch_basis(config.patch_size, d, rng),
               "cls_token": rng.normal(0.0, 0.5, size=d).astype(np.float32)}
    for layer in range(config.num_layers):
        weights[f"block{layer}.spatial.kernel"] = rng.normal(
            0.0, 1.0 / 3.0, size=(3, 3)).astype(np.float32)
        weights[f"block{layer}.mlp.w1"] = rng.normal(
            0.0, 1.0 / math.sqrt(d), size=(d, d)).astype(np.float32)
        weights[f"block{layer}.mlp.b1"] = rng.normal(0.0, 0.1, size=d).astype(np.float32)
        weights[f"block{layer}.mlp.w2"] = rng.normal(
            0.0, 1.0 / math.sqrt(d), size=(d, d)).astype(np.float32)
    return weights


class FrozenEncoder:
    """Feature extractor with immutable weights.

    All weight arrays are marked non-writeable at construction, so any
    attempt to update them raises immediately.
    """

    def __init__(self, config: EncoderConfig, weights: dict[str, np.ndarray]):
        expected = set(self.weight_names(config))
        got = set(weights)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ConfigError(
                f"encoder weight set mismatch (missing {missing}, unexpected {extra})")
        self.config = config
        self.weights = {}
        for name, arr in weights.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.flags.writeable = False
            self.weights[name] = arr

    @staticmethod
    def weight_names(config: EncoderConfig) -> list[str]:
        names = ["patch_embed.weight", "cls_token"]
        for layer in range(config.num_layers):
            names += [f"block{layer}.spatial.kernel", f"block{layer}.mlp.w1",
                      f"block{layer}.mlp.b1", f"block{layer}.mlp.w2"]
        return names

    @classmethod
    def from_config(cls, config: EncoderConfig) -> "FrozenEncoder":
        kind, _, arg = config.weights_source.partition(":")
        if kind == "seeded":
            seed = int(arg) if arg else 0
            return cls(config, surrogate_weights(config, seed))
        arrays, _ = tensorio.read_tensors(arg)
        return cls(config, arrays)

    def save_weights(self, path):
        tensorio.write_tensors(path, self.weights, meta={"kind": "encoder-weights"})

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.weights):
            arr = self.weights[name]
            digest.update(name.encode())
            digest.update(str(arr.shape).encode())
            digest.update(arr.tobytes())
        return digest.hexdigest()

    # ---- forward -----------------------------------------------------

    def _check_image_side(self, side: int):
        if side % self.config.patch_size != 0:
            raise ShapeError(
                f"image side {side} is not divisible by patch size "
                f"{self.config.patch_size}")

    def _forward_sequences(self, images: np.ndarray):
        """Returns (tap sequences [(N, 1+T, D)], final sequence)."""
        n, h, w, _ = images.shape
        self._check_image_side(h)
        self._check_image_side(w)
        p = self.config.patch_size
        d = self.config.embed_dim
        gh, gw = h // p, w // p
        patches = images.reshape(n, gh, p, gw, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(n, gh * gw, p * p * 3).astype(np.float32)
        tokens = (patches - 0.5) @ self.weights["patch_embed.weight"]
        tokens = tokens + POS_SCALE * positional_grid(gh, d).reshape(gh * gw, d)
        cls = np.broadcast_to(self.weights["cls_token"], (n, 1, d))
        seq = np.concatenate([cls, tokens], axis=1)

        taps = []
        for layer in range(self.config.num_layers):
            kernel = self.weights[f"block{layer}.spatial.kernel"]
            grid = seq[:, 1:].reshape(n, gh, gw, d)
            grid = grid + MIX_SCALE * np.tanh(_depthwise3x3(grid, kernel))
            seq = np.concatenate([seq[:, :1], grid.reshape(n, gh * gw, d)], axis=1)
            hidden = np.tanh(seq @ self.weights[f"block{layer}.mlp.w1"]
                             + self.weights[f"block{layer}.mlp.b1"])
            seq = seq + MIX_SCALE * (hidden @ self.weights[f"block{layer}.mlp.w2"])
            if layer in self.config.tap_layers:
                taps.append(seq)
        return taps, seq

    def encode(self, image: np.ndarray) -> list[FeatureMap]:
        """Feature grids for one (H, W, 3) image, one per tap layer."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
        tap_seqs, _ = self._forward_sequences(image[None])
        return [drop_cls_and_reshape(seq[0], depth_tag=tag)
                for seq, tag in zip(tap_seqs, self.config.tap_layers)]

    def encode_batch(self, images: np.ndarray):
        """Batched taps plus the final-layer grid and its pooled vector.

        Returns (tap_grids [(N, G, G, D)], pooled (N, D)).
        """
        tap_seqs, final_seq = self._forward_sequences(images)
        n = images.shape[0]
        g = images.shape[1] // self.config.patch_size
        d = self.config.embed_dim
        grids = [seq[:, 1:].reshape(n, g, g, d) for seq in tap_seqs]
        pooled = final_seq[:, 1:].mean(axis=1)
        return grids, pooled


@dataclass
class FuseProjection:
    """Trainable 1x1 projection of channel-concatenated tap grids.

    This is the first trainable stage of the network; it is not part of the
    frozen encoder.
    """

    num_taps: int
    embed_dim: int
    out_dim: int
    linear: Linear = field(init=False)

    def __post_init__(self):
        self.linear = Linear(self.num_taps * self.embed_dim, self.out_dim,
                             rng=None, name="fuse")

    def init_random(self, rng: np.random.Generator, dtype=np.float32):
        fan_in = self.num_taps * self.embed_dim
        self.linear.weight.value = (
            rng.normal(0.0, math.sqrt(2.0 / fan_in),
                       size=self.linear.weight.shape).astype(dtype))
        self.linear.bias.value = np.zeros(self.out_dim, dtype=dtype)
        self.linear.weight.grad = np.zeros_like(self.linear.weight.value)
        self.linear.bias.grad = np.zeros_like(self.linear.bias.value)

    def init_identity(self):
        """Averages the taps through stacked identity blocks (needs out_dim == D)."""
        if self.out_dim != self.embed_dim:
            raise ConfigError("identity init requires out_dim == embed_dim")
        eye = np.eye(self.embed_dim, dtype=np.float32) / self.num_taps
        self.linear.weight.value[...] = np.tile(eye, (self.num_taps, 1))
        self.linear.bias.value[...] = 0

    def params(self):
        return self.linear.params()

    def fuse(self, features: list[FeatureMap]) -> FeatureMap:
        """Channel-concatenates tap grids and projects to out_dim channels."""
        if len(features) != self.num_taps:
            raise ShapeError(
                f"expected {self.num_taps} tap feature maps, got {len(features)}")
        g = features[0].grid.shape[0]
        for fm in features:
            if fm.grid.shape[0] != g or fm.grid.shape[1] != g:
                raise ShapeError(
                    f"tap grids disagree on size: {fm.grid.shape[:2]} vs ({g}, {g})")
        stacked = np.concatenate([fm.grid for fm in features], axis=2)
        fused = self.linear.forward(stacked.reshape(g * g, -1)).reshape(g, g, self.out_dim)
        return FeatureMap(grid=fused, depth_tag=-1)

    def forward_grid(self, x: np.ndarray) -> np.ndarray:
        """x: (N, G, G, num_taps*D) -> (N, G, G, out_dim); caches for backward."""
        n, gh, gw, c = x.shape
        self._fwd_shape = x.shape
        out = self.linear.forward(np.ascontiguousarray(x).reshape(-1, c))
        return out.reshape(n, gh, gw, self.out_dim)

    def backward_grid(self, dout: np.ndarray) -> np.ndarray:
        n, gh, gw, c = self._fwd_shape
        dx = self.linear.backward(np.ascontiguousarray(dout).reshape(-1, self.out_dim))
        return dx.reshape(n, gh, gw, c)
