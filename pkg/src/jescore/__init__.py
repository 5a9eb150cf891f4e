"""Joint energy-score models: one network for classification and denoising.

A bias-free ResNet feature map ``f(y)`` feeds two linear heads. Class
logits ``W f(y)`` give ``p(c|y)``; the quadratic ``-(w.f(y))^2 / 2`` is an
unnormalized ``log p(y)``. Input gradients give scores, Tweedie denoisers
and adversarial directions from the same parameters.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import GmmSpec, ImageBatch, load_dataset, save_dataset, two_class_world
from .gradresnet import ArchConfig, small_config
from .joint import JointModel, build_joint
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "GmmSpec", "ImageBatch", "JointModel", "TrainConfig", "Trainer",
    "build_joint", "load_checkpoint", "load_dataset", "save_checkpoint", "save_dataset",
    "small_config", "two_class_world",
]
