"""Adversarially trained, regularized data augmentation.

Three conditional generators (global affine, local deformation, additive
appearance) are optimized jointly against a task network and a shared
discriminator: the generators try to produce challenging but realistic and
small transformations, the task network learns from clean plus augmented
data through per-group batch normalization.
"""

__version__ = "0.1.0"

from .config import RunConfig, DatasetConfig
from .data import build_dataset
from .generators import AugmentationGenerator, Discriminator, GeneratorOutput, apply_augmentation
from .losses import LossReport, LossWeights, grad_reverse, task_loss
from .target import TargetClassifier, TargetSegmenter, build_target
from .trainer import Trainer, TripletState, split_batch, train_step
from .warp import affine_to_flow, identity_flow, spatial_gradient, warp

__all__ = [
    "__version__",
    "RunConfig", "DatasetConfig", "build_dataset",
    "AugmentationGenerator", "Discriminator", "GeneratorOutput", "apply_augmentation",
    "LossReport", "LossWeights", "grad_reverse", "task_loss",
    "TargetClassifier", "TargetSegmenter", "build_target",
    "Trainer", "TripletState", "split_batch", "train_step",
    "affine_to_flow", "identity_flow", "spatial_gradient", "warp",
]
