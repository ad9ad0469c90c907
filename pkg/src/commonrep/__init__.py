"""Common-representation learning for RGB-D segmentation and depth estimation."""

from .autodiff import Variable, backward, no_grad
from .data import SceneSpec, Sample, generate_dataset, generate_scene
from .training import Model, TrainConfig, evaluate, predict, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Model",
    "Sample",
    "SceneSpec",
    "TrainConfig",
    "Variable",
    "backward",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "no_grad",
    "predict",
    "train_stage1",
    "train_stage2",
]
