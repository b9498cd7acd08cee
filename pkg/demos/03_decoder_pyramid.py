"""Walk the decoder from a coarse feature grid back to full resolution.

Every stage doubles the spatial side with a learned 2x2 stride-2 transposed
convolution, concatenates a skip feature map from the frozen encoder, and
refines with two 3x3 convolutions. The number of stages is forced by
geometry: grid * 2**stages == image side, checked at construction.

Run from the repository root:  python3 demos/03_decoder_pyramid.py
"""

import numpy as np

from segrl.decoder import Decoder, DecoderConfig, softmax_pixelwise

print(f"{'image':>6} {'patch':>6} {'grid':>5} {'stages':>7}  channel schedule")
for side in (32, 64, 128):
    for patch in (4, 8, 16):
        if side % patch:
            continue
        grid = side // patch
        cfg = DecoderConfig(grid_size=grid, image_side=side, in_dim=128,
                            num_classes=4)
        print(f"{side:>6} {patch:>6} {grid:>5} {cfg.num_stages:>7}  {cfg.channels}")

# one concrete pass, stage by stage
cfg = DecoderConfig(grid_size=8, image_side=64, in_dim=128, num_classes=4,
                    skip_dim=64)
dec = Decoder(cfg, rng=np.random.default_rng(0))
x = np.random.default_rng(1).standard_normal((2, 8, 8, 128)).astype(np.float32)
skips = [np.random.default_rng(2 + s).standard_normal((2, 8, 8, 64)).astype(np.float32)
         for s in range(3)]

print(f"\ninput grid: {x.shape}")
h = x
for s in range(cfg.num_stages):
    h = dec.upsample_stage(h, s, skip=skips[min(s, len(skips) - 1)])
    print(f"  after stage {s}: {h.shape}")

logits = dec.forward(x, skips=skips)
print(f"logits: {logits.shape}  (class axis second, ready for argmax)")

# the classifier head starts at zero, so an untrained decoder is maximally
# noncommittal: every pixel gets the uniform distribution
probs = softmax_pixelwise(logits)
print(f"softmax sums to {float(probs.sum(axis=1).mean()):.6f} per pixel; "
      f"untrained spread {float(probs.max() - probs.min()):.2e}")
