"""Skeleton-sequence classification with a stacked spatial-temporal transformer."""

from .augment import AugmentConfig
from .model import ModelConfig, forward, init_params
from .skeleton_io import DatasetManifest, SkeletonSequence, SplitAssignment, load_manifest, make_split
from .train import TrainConfig, TrainState, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
