"""Dual-forward path teacher knowledge distillation on a small numpy autodiff engine."""

from .tensor import Tensor, backward, no_grad
from .losses import SoftPrediction, cross_entropy, decompose_kd, distillation_loss, soften
from .models import build, load_checkpoint, save_checkpoint
from .dfpt import DualForwardTeacher, PromptConfig
from .trainer import TrainConfig, pretrain_teacher, run

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "SoftPrediction", "cross_entropy", "decompose_kd", "distillation_loss", "soften",
    "build", "load_checkpoint", "save_checkpoint",
    "DualForwardTeacher", "PromptConfig",
    "TrainConfig", "pretrain_teacher", "run",
]
