"""Assembly of the full segmentation network.

The data path is: frozen encoder taps -> trainable 1x1 fusion -> upsampling
decoder (with the tap grids doubling as skip features) -> initial logits z
-> residual correction r -> refined logits O = z + alpha * r, with alpha
chosen by the policy head from the pooled final-layer embedding.

Because the encoder never changes, its tap grids and pooled vectors can be
computed once per dataset and reused every epoch; all forward/backward
methods here start from those cached features. Ablation modes that disable
refinement ("baseline", "curriculum") still construct the residual and
policy weights from the same seeded streams, so every mode starts from
bit-identical shared parameters and differs only in the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, DecoderConfig
from .encoder import FrozenEncoder, FuseProjection
from .errors import ConfigError
from .nn import zero_grads
from .refine import ActionSpace, PolicyNet, ResidualRefiner

# child-stream indices off the model seed; fixed so that modes and resumed
# runs draw identical initial weights
STREAM_FUSE_DECODER = 0
STREAM_RESIDUAL = 1
STREAM_POLICY = 2


@dataclass
class BatchOutputs:
    """Everything the backward pass and the RL update need from one forward."""

    z: np.ndarray                       # (N, K, H, W) initial logits
    refined: np.ndarray                 # (N, K, H, W) refined logits
    r: np.ndarray | None                # residual correction, None if disabled
    alphas: np.ndarray | None           # (N,) chosen scales
    action_probs: np.ndarray | None     # (N, |A|)
    action_indices: np.ndarray | None   # (N,)
    log_probs: np.ndarray | None        # (N,)


@dataclass
class FeatureCache:
    """Frozen-encoder products for a fixed sample set, precomputed once.

    fuse_x is the channel-concatenation of all tap grids (the fusion input);
    stage_skips holds each decoder stage's skip feature already resized to
    that stage's output resolution, so no resampling happens inside the
    training loop.
    """

    fuse_x: np.ndarray                  # (N, G, G, taps*D)
    stage_skips: list[np.ndarray]       # per stage: (N, G*2^(s+1), ..., D)
    pooled: np.ndarray                  # (N, D)

    def take(self, idx) -> "FeatureCache":
        return FeatureCache(fuse_x=self.fuse_x[idx],
                            stage_skips=[s[idx] for s in self.stage_skips],
                            pooled=self.pooled[idx])

    def __len__(self):
        return self.fuse_x.shape[0]


class SegmentationModel:
    def __init__(self, encoder: FrozenEncoder, image_side: int, num_classes: int,
                 decode_dim: int = 128, actions: ActionSpace | None = None,
                 seed: int = 0):
        cfg = encoder.config
        if image_side % cfg.patch_size:
            raise ConfigError(
                f"image side {image_side} not divisible by patch size {cfg.patch_size}")
        grid = image_side // cfg.patch_size
        self.encoder = encoder
        self.image_side = image_side
        self.num_classes = num_classes
        self.actions = actions or ActionSpace()

        seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        rng_fd = np.random.default_rng(np.random.SeedSequence((seed, STREAM_FUSE_DECODER)))
        rng_res = np.random.default_rng(np.random.SeedSequence((seed, STREAM_RESIDUAL)))
        rng_pol = np.random.default_rng(np.random.SeedSequence((seed, STREAM_POLICY)))

        self.fuse = FuseProjection(len(cfg.tap_layers), cfg.embed_dim, decode_dim)
        self.fuse.init_random(rng_fd)
        self.decoder = Decoder(
            DecoderConfig(grid_size=grid, image_side=image_side, in_dim=decode_dim,
                          num_classes=num_classes, skip_dim=cfg.embed_dim),
            rng=rng_fd)
        self.residual = ResidualRefiner(num_classes, rng_res)
        self.policy = PolicyNet(cfg.embed_dim, self.actions, rng_pol)

    # ---- parameter groups ----------------------------------------------

    def seg_params(self):
        """Everything trained by the segmentation loss (fusion, decoder, residual)."""
        return self.fuse.params() + self.decoder.params() + self.residual.params()

    def policy_params(self):
        return self.policy.params()

    def params(self):
        return self.seg_params() + self.policy_params()

    def zero_grads(self):
        zero_grads(self.params())

    # ---- feature extraction ----------------------------------------------

    def extract_features(self, images: np.ndarray):
        """(N, H, W, 3) images -> (tap grids as (N, G, G, D) list, pooled (N, D)).

        Pure function of the frozen weights; results are safe to cache for
        the lifetime of the model.
        """
        grids, pooled = self.encoder.encode_batch(images)
        grids = [np.ascontiguousarray(g, dtype=np.float32) for g in grids]
        return grids, pooled.astype(np.float32)

    def build_cache(self, grids: list[np.ndarray], pooled: np.ndarray) -> FeatureCache:
        """Precomputes the fusion input and per-stage resized skip features."""
        from .nn import bilinear_resize_nhwc

        fuse_x = np.ascontiguousarray(np.concatenate(grids, axis=3))
        stage_skips = []
        g = grids[0].shape[1]
        for s in range(self.decoder.config.num_stages):
            src = self.decoder._skip_for_stage(grids, s)
            size = g * (2 ** (s + 1))
            stage_skips.append(
                np.ascontiguousarray(bilinear_resize_nhwc(src, size, size)))
        return FeatureCache(fuse_x=fuse_x, stage_skips=stage_skips, pooled=pooled)

    def cache_images(self, images: np.ndarray) -> FeatureCache:
        grids, pooled = self.extract_features(images)
        return self.build_cache(grids, pooled)

    # ---- forward ---------------------------------------------------------

    def forward_cache(self, cache: FeatureCache, action_mode: str = "off",
                      rng: np.random.Generator | None = None) -> BatchOutputs:
        """Forward pass from precomputed features.

        action_mode 'off' skips the residual and policy entirely (refined is
        z itself); 'sample' draws one alpha per image from the policy;
        'greedy' takes the argmax action.
        """
        fused = self.fuse.forward_grid(cache.fuse_x)
        z = self.decoder.forward(fused, stage_skips=cache.stage_skips)
        pooled = cache.pooled
        if action_mode == "off":
            return BatchOutputs(z=z, refined=z, r=None, alphas=None,
                                action_probs=None, action_indices=None,
                                log_probs=None)
        r = self.residual.forward(z)
        if action_mode == "sample":
            probs, indices, log_probs, alphas = self.policy.sample_batch(pooled, rng)
        elif action_mode == "greedy":
            probs, indices, alphas = self.policy.greedy_batch(pooled)
            log_probs = np.log(np.maximum(probs[np.arange(len(indices)), indices], 1e-12))
        else:
            raise ValueError(f"unknown action_mode {action_mode!r}")
        refined = z + alphas[:, None, None, None].astype(z.dtype) * r
        return BatchOutputs(z=z, refined=refined, r=r, alphas=alphas,
                            action_probs=probs, action_indices=indices,
                            log_probs=log_probs)

    def forward_features(self, grids: list[np.ndarray], pooled: np.ndarray,
                         action_mode: str = "off",
                         rng: np.random.Generator | None = None) -> BatchOutputs:
        """Forward pass from raw tap grids (builds a one-shot cache)."""
        return self.forward_cache(self.build_cache(grids, pooled), action_mode, rng)

    # ---- backward --------------------------------------------------------

    def backward_seg(self, outputs: BatchOutputs, dlogits: np.ndarray) -> None:
        """Backprop of the segmentation loss gradient at the refined logits.

        O = z + alpha*r routes gradient both directly into z and, scaled by
        each image's alpha, through the residual convolutions into z again.
        Policy weights are untouched: the sampled alpha is a constant here.
        """
        if outputs.r is not None:
            dz = dlogits + self.residual.backward(
                outputs.alphas[:, None, None, None].astype(dlogits.dtype) * dlogits)
        else:
            dz = dlogits
        dfused = self.decoder.backward(dz)
        self.fuse.backward_grid(dfused)

    def backward_policy(self, outputs: BatchOutputs, coeff: np.ndarray) -> None:
        """REINFORCE update; coeff is per-image advantage times any loss scale."""
        self.policy.backward_batch(outputs.action_probs, outputs.action_indices, coeff)

    # ---- inference --------------------------------------------------------

    def predict_cache(self, cache: FeatureCache, apply_refinement: bool = True):
        """Greedy-action inference from cached features.

        Returns (label maps (N, H, W) int64, refined logits, alphas or None).
        """
        mode = "greedy" if apply_refinement else "off"
        out = self.forward_cache(cache, action_mode=mode)
        return out.refined.argmax(axis=1), out.refined, out.alphas

    def predict_images(self, images: np.ndarray, apply_refinement: bool = True):
        return self.predict_cache(self.cache_images(images), apply_refinement)

    def predict_mask(self, image: np.ndarray, apply_refinement: bool = True) -> np.ndarray:
        """(H, W, 3) image -> (H, W) predicted class mask."""
        labels, _, _ = self.predict_images(image[None], apply_refinement)
        return labels[0]
