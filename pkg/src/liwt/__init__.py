"""Arbitrary-scale super-resolution with a wavelet-guided local implicit model, in pure numpy."""

from .autodiff import Tensor, backward, no_grad
from .config import Config, load_config, parse_config
from .data import CurriculumSchedule, load_images, read_png, write_png
from .estimator import LiwtSuperResolver
from .metrics import psnr, ssim
from .model import LiwtModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit
from .wavelet import dwt, idwt

__all__ = [
    "Config", "CurriculumSchedule", "LiwtModel", "LiwtSuperResolver", "ModelConfig", "Tensor",
    "TrainConfig", "backward", "dwt", "fit", "idwt", "load_checkpoint", "load_config",
    "load_images", "no_grad", "parse_config", "psnr", "read_png", "save_checkpoint", "ssim", "write_png",
]
__version__ = "0.1.0"
