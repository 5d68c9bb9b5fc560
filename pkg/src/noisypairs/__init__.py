"""Noisy positive pairs in contrastive pretraining for semantic segmentation."""

__version__ = "0.1.0"

from .losses import (cross_image_loss, downsample_label, extract_feature_map,
                     info_nce, momentum_update, within_image_loss)
from .training import Checkpoint, ExperimentConfig, evaluate_f1, finetune, pretrain

__all__ = [
    "Checkpoint", "ExperimentConfig", "cross_image_loss", "downsample_label",
    "evaluate_f1", "extract_feature_map", "finetune", "info_nce",
    "momentum_update", "pretrain", "within_image_loss",
]
