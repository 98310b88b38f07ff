"""Unpaired radargram layer highlighting with a from-scratch CycleGAN."""

from .autodiff import Tensor, backward, conv2d, conv_transpose2d, no_grad, normalize
from .evaluation import MetricsReport, evaluate, full_cycle, mse, psnr
from .model import CycleGanModel, build_discriminator, build_generator, build_model
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CycleGanModel",
    "MetricsReport",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_discriminator",
    "build_generator",
    "build_model",
    "conv2d",
    "conv_transpose2d",
    "evaluate",
    "full_cycle",
    "load_checkpoint",
    "mse",
    "no_grad",
    "normalize",
    "psnr",
    "save_checkpoint",
    "train",
]
