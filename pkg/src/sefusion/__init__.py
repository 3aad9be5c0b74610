"""Two-branch CNN classifier with squeeze-and-excitation fusion, on a small numpy autodiff core."""
from .estimator import FusionClassifier
from .model import (
    BackboneConfig,
    FusionModel,
    FusionModelConfig,
    Stage,
    build_model,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    set_trainable_tail,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad

__all__ = [
    "BackboneConfig",
    "FusionClassifier",
    "FusionModel",
    "FusionModelConfig",
    "Stage",
    "Tensor",
    "backward",
    "build_model",
    "finite_diff_check",
    "forward",
    "load_checkpoint",
    "no_grad",
    "predict",
    "save_checkpoint",
    "set_trainable_tail",
]

__version__ = "0.1.0"
