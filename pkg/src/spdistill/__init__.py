"""Similarity-preserving knowledge distillation for small convnets.

Modules: tensor (autodiff engine), similarity (pairwise-similarity
matrices and the SP loss), losses (CE / softened-score / attention
transfer / combined objective), models (tappable convnets and
checkpoints), data (CIFAR-10 binary loading, augmentation, synthetic
sets), trainer (SGD-Nesterov training loop), cli (command-line surface).
"""

from . import _malloc

_malloc.tune()

from .losses import DistillConfig, at_loss, ce_loss, kd_loss, total_loss
from .models import ConvNetSpec, Network, build, forward_with_taps
from .similarity import GramMatrix, LayerPairSet, flatten, gram, sp_loss
from .tensor import Tensor, grad_check
from .trainer import TrainConfig, evaluate, train_distilled

__version__ = "0.1.0"

__all__ = [
    "ConvNetSpec",
    "DistillConfig",
    "GramMatrix",
    "LayerPairSet",
    "Network",
    "Tensor",
    "TrainConfig",
    "at_loss",
    "build",
    "ce_loss",
    "evaluate",
    "flatten",
    "forward_with_taps",
    "grad_check",
    "gram",
    "kd_loss",
    "sp_loss",
    "total_loss",
    "train_distilled",
]
