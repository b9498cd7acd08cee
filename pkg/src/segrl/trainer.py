"""Training loop, validation, checkpointing, and the ablation harness.

One Adam optimizer drives all trainable parameters. Per epoch e the
curriculum factor f = (1 - e/T)^2 weights the hybrid objective
f * L_seg + (1 - f) * L_RL; the segmentation gradient is scaled by f before
backprop and the REINFORCE coefficient by (1 - f), which is exactly the
gradient of that objective. Ablation modes:

- ``baseline``:       L_seg only, no curriculum weighting, refinement off.
- ``curriculum``:     f * L_seg (schedule active, RL head disabled).
- ``curriculum_rl``:  the full hybrid objective with sampled refinement.

Every run is a deterministic function of (config, dataset): parameter
initialization, batch order and action sampling each draw from fixed child
streams of the config seed, and the frozen encoder contributes no
randomness at all. Frozen tap grids and pooled vectors are computed once
per dataset and reused every epoch.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses, metrics, tensorio
from .dataset import SceneSample, split_dataset
from .encoder import EncoderConfig, FrozenEncoder
from .errors import ConfigError, TrainingDiverged
from .model import SegmentationModel
from .nn import Adam, clip_global_norm
from .refine import (ActionSpace, BaselineState, compute_rewards_batch,
                     update_baseline)

ABLATION_MODES = ("baseline", "curriculum", "curriculum_rl")
ABLATION_LABELS = {"baseline": "Baseline",
                   "curriculum": "Curriculum Learning",
                   "curriculum_rl": "Curriculum Learning + RL"}

# full-scale reference ablation scores (mIoU, Dice), printed as a footer for
# orientation only; desk-scale runs are not comparable and never asserted
# against these
REFERENCE_ABLATION = {"baseline": (72.4, 75.1),
                      "curriculum": (76.8, 79.3),
                      "curriculum_rl": (81.0, 88.0)}

# child-stream indices off the run seed (model init uses 0-2, see model.py)
STREAM_SHUFFLE = 3
STREAM_ACTIONS = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.2
    ablation_mode: str = "curriculum_rl"
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    action_space: ActionSpace = field(default_factory=ActionSpace)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    baseline_momentum: float = 0.9
    decode_dim: int = 128
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie strictly between 0 and 1")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(
                f"ablation_mode must be one of {ABLATION_MODES}, "
                f"got {self.ablation_mode!r}")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        if self.decode_dim < 1:
            raise ConfigError("decode_dim must be >= 1")


def config_fingerprint(config: TrainConfig) -> str:
    """Short stable digest of every field, for stamping checkpoints."""
    blob = json.dumps(asdict(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainHistory:
    """Per-epoch training trace; one list entry per completed epoch."""

    epochs: list[int] = field(default_factory=list)
    l_seg: list[float] = field(default_factory=list)
    l_rl: list[float] = field(default_factory=list)
    l_total: list[float] = field(default_factory=list)
    f_epoch: list[float] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    baseline: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "l_seg", "l_rl", "l_total", "f_epoch",
               "mean_reward", "baseline", "val_miou", "val_dice")

    def append(self, **kw):
        self.epochs.append(kw["epoch"])
        for col in self.COLUMNS[1:]:
            getattr(self, col).append(kw[col])

    def num_epochs(self) -> int:
        return len(self.epochs)

    def to_text(self) -> str:
        """Columnar plain text, one row per epoch."""
        lines = ["  ".join(f"{c:>12}" for c in self.COLUMNS)]
        for i in range(self.num_epochs()):
            row = [f"{self.epochs[i]:>12d}"]
            for col in self.COLUMNS[1:]:
                row.append(f"{getattr(self, col)[i]:>12.6f}")
            lines.append("  ".join(row))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


@dataclass
class CheckpointBundle:
    """Everything needed to restore the trained state of a run."""

    weights: dict[str, np.ndarray]
    baseline: BaselineState
    epoch: int
    best_val_miou: float
    best_val_dice: float
    config_fingerprint: str
    ablation_mode: str


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    meta = {"kind": "checkpoint",
            "epoch": bundle.epoch,
            "best_val_miou": bundle.best_val_miou,
            "best_val_dice": bundle.best_val_dice,
            "config_fingerprint": bundle.config_fingerprint,
            "ablation_mode": bundle.ablation_mode,
            "baseline": {"value": bundle.baseline.value,
                         "momentum": bundle.baseline.momentum,
                         "initialized": bundle.baseline.initialized}}
    tensorio.write_tensors(path, bundle.weights, meta=meta)


def load_checkpoint(path) -> CheckpointBundle:
    arrays, meta = tensorio.read_tensors(path)
    b = meta.get("baseline", {})
    baseline = BaselineState(value=float(b.get("value", 0.0)),
                             momentum=float(b.get("momentum", 0.9)),
                             initialized=bool(b.get("initialized", False)))
    return CheckpointBundle(weights=arrays, baseline=baseline,
                            epoch=int(meta.get("epoch", -1)),
                            best_val_miou=float(meta.get("best_val_miou", math.nan)),
                            best_val_dice=float(meta.get("best_val_dice", math.nan)),
                            config_fingerprint=str(meta.get("config_fingerprint", "")),
                            ablation_mode=str(meta.get("ablation_mode", "")))


def snapshot_weights(model: SegmentationModel) -> dict[str, np.ndarray]:
    out = {}
    for p in model.params():
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p.value.copy()
    return out


def apply_weights(model: SegmentationModel, weights: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in model.params()}
    missing = sorted(set(params) - set(weights))
    extra = sorted(set(weights) - set(params))
    if missing or extra:
        raise ConfigError(
            f"checkpoint weights do not match the model (missing {missing}, "
            f"unexpected {extra})")
    for name, p in params.items():
        arr = weights[name]
        if tuple(arr.shape) != tuple(p.value.shape):
            raise ConfigError(
                f"checkpoint weight {name!r} has shape {arr.shape}, "
                f"model expects {p.value.shape}")
        p.value[...] = arr


def build_model(config: TrainConfig, image_side: int, num_classes: int,
                encoder: FrozenEncoder | None = None) -> SegmentationModel:
    encoder = encoder or FrozenEncoder.from_config(config.encoder)
    return SegmentationModel(encoder, image_side, num_classes,
                             decode_dim=config.decode_dim,
                             actions=config.action_space, seed=config.seed)


def cache_features(model: SegmentationModel, samples: list[SceneSample],
                   chunk: int = 32):
    """Precomputes every frozen-encoder product for a sample list.

    Returns (FeatureCache, masks (N, H, W)). Valid for the whole run because
    the encoder never changes.
    """
    grids_parts, pooled_parts = [], []
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        images = np.stack([s.image for s in batch])
        g, p = model.extract_features(images)
        grids_parts.append(g)
        pooled_parts.append(p)
    ntaps = len(grids_parts[0])
    grids = [np.concatenate([part[t] for part in grids_parts]) for t in range(ntaps)]
    pooled = np.concatenate(pooled_parts)
    masks = np.stack([s.mask for s in samples])
    return model.build_cache(grids, pooled), masks


def _validate_cached(model: SegmentationModel, cache, masks,
                     apply_refinement: bool,
                     batch_size: int = 32) -> metrics.MetricsReport:
    counts = metrics.ConfusionCounts(model.num_classes)
    n = masks.shape[0]
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        labels, _, _ = model.predict_cache(cache.take(sl), apply_refinement)
        for i in range(labels.shape[0]):
            metrics.accumulate(counts, labels[i], masks[sl][i])
    return metrics.report_from_counts(counts)


def validate(model: SegmentationModel, val_set: list[SceneSample],
             mode: str = "curriculum_rl") -> metrics.MetricsReport:
    """Greedy-action evaluation; mutates no weights and no baseline."""
    if not val_set:
        raise ValueError("validation set is empty")
    cache, masks = cache_features(model, val_set)
    return _validate_cached(model, cache, masks,
                            apply_refinement=(mode == "curriculum_rl"))


def train(config: TrainConfig, dataset: list[SceneSample],
          encoder: FrozenEncoder | None = None, checkpoint_path=None,
          log=None) -> tuple[CheckpointBundle, TrainHistory]:
    """Full training run; returns the best-validation-mIoU bundle and the trace.

    If checkpoint_path is given, the bundle is (re)written there every time
    validation mIoU strictly improves, and never otherwise.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    train_set, val_set = split_dataset(dataset, config.val_fraction, config.seed)
    image_side = dataset[0].image.shape[0]
    num_classes = int(max(int(s.mask.max()) for s in dataset)) + 1

    model = build_model(config, image_side, num_classes, encoder)
    optimizer = Adam(model.params(), lr=config.learning_rate, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps)
    seed = int(config.seed) & 0xFFFFFFFFFFFFFFFF
    rng_shuffle = np.random.default_rng(np.random.SeedSequence((seed, STREAM_SHUFFLE)))
    rng_actions = np.random.default_rng(np.random.SeedSequence((seed, STREAM_ACTIONS)))

    tr_cache, tr_masks = cache_features(model, train_set)
    va_cache, va_masks = cache_features(model, val_set)

    mode = config.ablation_mode
    rl_active = mode == "curriculum_rl"
    baseline = BaselineState(momentum=config.baseline_momentum)
    fingerprint = config_fingerprint(config)
    history = TrainHistory()
    best_miou = -math.inf
    best_bundle = None
    n_train = len(train_set)

    for epoch in range(config.epochs):
        f = losses.curriculum_factor(epoch, config.epochs)
        seg_scale = 1.0 if mode == "baseline" else f
        order = rng_shuffle.permutation(n_train)
        ep_seg, ep_rl, ep_reward, n_batches = 0.0, 0.0, 0.0, 0

        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            masks = tr_masks[idx]
            model.zero_grads()

            out = model.forward_cache(
                tr_cache.take(idx),
                action_mode="sample" if rl_active else "off",
                rng=rng_actions if rl_active else None)
            l_seg, _, _, _, dlogits = losses.seg_loss_and_grad(
                out.refined, masks, config.loss_weights)

            l_rl = 0.0
            if rl_active:
                rewards = compute_rewards_batch(out.refined, out.z, masks)
                if not baseline.initialized:
                    # seed b with the first observed mean reward; the EMA
                    # update below is then a no-op for this step
                    baseline = update_baseline(baseline, float(rewards.mean()))
                advantages = rewards - baseline.value
                baseline = update_baseline(baseline, float(rewards.mean()))
                l_rl = float((-out.log_probs * advantages).mean())
                if 1.0 - f > 0.0:
                    model.backward_policy(out, (1.0 - f) * advantages)
                ep_reward += float(rewards.mean())

            l_total = losses.total_loss(l_seg, l_rl, f) if mode != "baseline" else l_seg
            if not math.isfinite(l_total):
                raise TrainingDiverged(epoch=epoch, batch=n_batches, value=l_total)

            if seg_scale > 0.0:
                model.backward_seg(out, seg_scale * dlogits)
            clip_global_norm(model.params(), config.grad_clip)
            optimizer.step()

            ep_seg += l_seg
            ep_rl += l_rl
            n_batches += 1

        report = _validate_cached(model, va_cache, va_masks,
                                  apply_refinement=rl_active)
        history.append(epoch=epoch,
                       l_seg=ep_seg / n_batches,
                       l_rl=ep_rl / n_batches,
                       l_total=(losses.total_loss(ep_seg / n_batches,
                                                  ep_rl / n_batches, f)
                                if mode != "baseline" else ep_seg / n_batches),
                       f_epoch=f,
                       mean_reward=ep_reward / n_batches if rl_active else 0.0,
                       baseline=baseline.value,
                       val_miou=report.mean_iou,
                       val_dice=report.dice)
        if log:
            log(f"epoch {epoch:3d}  f={f:.4f}  l_seg={ep_seg / n_batches:.4f}  "
                f"l_rl={ep_rl / n_batches:+.5f}  val_miou={report.mean_iou:.4f}  "
                f"val_dice={report.dice:.4f}")

        if report.mean_iou > best_miou:
            best_miou = report.mean_iou
            best_bundle = CheckpointBundle(
                weights=snapshot_weights(model), baseline=baseline, epoch=epoch,
                best_val_miou=report.mean_iou, best_val_dice=report.dice,
                config_fingerprint=fingerprint, ablation_mode=mode)
            if checkpoint_path is not None:
                save_checkpoint(best_bundle, checkpoint_path)

    return best_bundle, history


@dataclass
class AblationRow:
    mode: str
    miou_values: list[float]
    dice_values: list[float]

    @property
    def miou_mean(self):
        return float(np.mean(self.miou_values))

    @property
    def miou_std(self):
        return float(np.std(self.miou_values))

    @property
    def dice_mean(self):
        return float(np.mean(self.dice_values))

    @property
    def dice_std(self):
        return float(np.std(self.dice_values))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    num_seeds: int

    def to_text(self) -> str:
        lines = [f"{'configuration':<28}{'mIoU':>16}{'Dice':>16}"]
        for row in self.rows:
            lines.append(f"{ABLATION_LABELS[row.mode]:<28}"
                         f"{row.miou_mean:>9.4f} ±{row.miou_std:.4f}"
                         f"{row.dice_mean:>9.4f} ±{row.dice_std:.4f}")
        lines.append("")
        lines.append("reference (full-scale runs, %; for orientation only, not "
                     "a target):")
        for mode in ABLATION_MODES:
            miou, dice = REFERENCE_ABLATION[mode]
            lines.append(f"  {ABLATION_LABELS[mode]:<26} mIoU {miou:.1f}  Dice {dice:.1f}")
        return "\n".join(lines) + "\n"


def run_ablation(base_config: TrainConfig, dataset: list[SceneSample],
                 num_seeds: int = 3, log=None, on_run=None) -> AblationTable:
    """Trains all three configurations on identical data and seed sets.

    on_run, when given, is called as on_run(mode, seed, bundle, history)
    after each completed training run so callers can persist raw results.
    """
    if num_seeds < 1:
        raise ConfigError("num_seeds must be >= 1")
    encoder = FrozenEncoder.from_config(base_config.encoder)
    rows = []
    for mode in ABLATION_MODES:
        miou_values, dice_values = [], []
        for s in range(num_seeds):
            cfg = replace(base_config, ablation_mode=mode, seed=base_config.seed + s)
            t0 = time.time()
            bundle, history = train(cfg, dataset, encoder=encoder)
            if on_run is not None:
                on_run(mode, cfg.seed, bundle, history)
            miou_values.append(bundle.best_val_miou)
            dice_values.append(bundle.best_val_dice)
            if log:
                log(f"{mode:>14} seed {cfg.seed}: best val mIoU "
                    f"{bundle.best_val_miou:.4f}, Dice {bundle.best_val_dice:.4f} "
                    f"({time.time() - t0:.0f}s)")
        rows.append(AblationRow(mode=mode, miou_values=miou_values,
                                dice_values=dice_values))
    return AblationTable(rows=rows, num_seeds=num_seeds)
