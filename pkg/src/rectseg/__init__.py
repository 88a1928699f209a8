"""Uncertainty-rectified pseudo-label self-training for segmentation on synthetic shifts."""
from .model import ArchConfig, TwoHeadSegNet, forward, init_params, load_checkpoint, save_checkpoint
from .train import ExperimentConfig, adapt, pretrain_source

__all__ = ["ArchConfig", "TwoHeadSegNet", "forward", "init_params", "load_checkpoint",
           "save_checkpoint", "ExperimentConfig", "adapt", "pretrain_source"]
__version__ = "0.1.0"
