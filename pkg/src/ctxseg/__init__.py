"""Continual semantic segmentation on synthetic scenes, with pseudo-label
fusion, new-class-erased image duplets, a context consistency loss and
adaptive class-balance weighting."""

from .synth import (
    BACKGROUND,
    IGNORE,
    LabeledImage,
    SceneSpec,
    StepDataset,
    TaskSequence,
    build_task_sequence,
    generate_dataset,
    materialize_step,
)
from .model import ArchConfig, SegModel, extend_head, phi_pool, softmax_scores
from .pseudo import PixelSet, RefinedTarget, fuse_targets, old_pixel_set, predict_pseudo
from .duplet import Duplet, DupletBatch, compose_batch, erase_new_pixels, make_duplet
from .losses import (
    LossBreakdown,
    LossHyper,
    bps_loss,
    ctx_loss,
    kd_loss,
    ps_loss,
    total_loss,
    weight_map,
)
from .evaluate import ConfusionMatrix, MetricsReport, accumulate, miou
from .trainer import TrainConfig, run_continual, train_first_step, train_increment_step

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "IGNORE",
    "LabeledImage",
    "SceneSpec",
    "StepDataset",
    "TaskSequence",
    "build_task_sequence",
    "generate_dataset",
    "materialize_step",
    "ArchConfig",
    "SegModel",
    "extend_head",
    "phi_pool",
    "softmax_scores",
    "PixelSet",
    "RefinedTarget",
    "fuse_targets",
    "old_pixel_set",
    "predict_pseudo",
    "Duplet",
    "DupletBatch",
    "compose_batch",
    "erase_new_pixels",
    "make_duplet",
    "LossBreakdown",
    "LossHyper",
    "bps_loss",
    "ctx_loss",
    "kd_loss",
    "ps_loss",
    "total_loss",
    "weight_map",
    "ConfusionMatrix",
    "MetricsReport",
    "accumulate",
    "miou",
    "TrainConfig",
    "run_continual",
    "train_first_step",
    "train_increment_step",
]
