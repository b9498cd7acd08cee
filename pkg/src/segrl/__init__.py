"""Surgical-scene segmentation with a frozen encoder and RL-refined logits.

The pipeline: a frozen token encoder produces multi-depth feature grids;
a trainable fusion plus transposed-convolution decoder reconstructs
per-pixel class logits; a REINFORCE-trained policy scales a residual
correction of those logits; training blends segmentation and RL losses
under a quadratic curriculum schedule.
"""

from .dataset import (DatasetConfig, SceneSample, generate_dataset, generate_scene,
                      split_dataset)
from .decoder import Decoder, DecoderConfig, LogitMap, ProbMap, softmax_pixelwise
from .encoder import (EncoderConfig, FeatureMap, FrozenEncoder, FuseProjection,
                      drop_cls_and_reshape, global_pool)
from .errors import (CheckpointIntegrityError, CheckpointVersionError, ConfigError,
                     DataIOError, ShapeError, TrainingDiverged)
from .losses import (CurriculumState, LossWeights, cross_entropy, curriculum_factor,
                     dice_loss, seg_loss, total_loss)
from .metrics import (ConfusionCounts, MetricsReport, accumulate, dice_coefficient,
                      iou_per_class, mean_iou)
from .model import SegmentationModel
from .refine import (ActionSpace, BaselineState, PolicyNet, PolicyOutput,
                     ResidualRefiner, compute_reward, policy_forward, policy_loss,
                     refine, residual, update_baseline)
from .trainer import (CheckpointBundle, TrainConfig, TrainHistory, load_checkpoint,
                      run_ablation, save_checkpoint, train, validate)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
