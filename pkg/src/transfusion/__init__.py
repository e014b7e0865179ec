"""Multimodal crowd-count regression from WiFi CSI amplitude and room images.

A cross-modal transformer with linear/softmax attention kernels and multi-scale
convolutional sublayers, trained with Adam on L1 loss, built on a minimal
reverse-mode autodiff tensor engine. See README.md for the CLI and the
acceptance suite.
"""

from .tensor import Tensor, backward, grad_check, no_grad
from .model import ModelConfig, TransFusionModel, build, forward, l1_loss, ablate
from .data import SyntheticSpec, generate, split
from .train import TrainConfig, fit
from .evaluation import compute_metrics, evaluate, ablation_study

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "ModelConfig",
    "TransFusionModel",
    "build",
    "forward",
    "l1_loss",
    "ablate",
    "SyntheticSpec",
    "generate",
    "split",
    "TrainConfig",
    "fit",
    "compute_metrics",
    "evaluate",
    "ablation_study",
    "__version__",
]
