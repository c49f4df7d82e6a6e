"""Complex-valued variational U-Net for single-channel speech enhancement."""

from .dsp import StftConfig, istft, stft
from .model import ModelConfig, build, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["ModelConfig", "StftConfig", "build", "istft", "load_checkpoint", "save_checkpoint", "stft"]
