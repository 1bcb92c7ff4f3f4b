"""Reference-based, instance-aware line art colorization.

A small latent diffusion model colorizes a line-art frame from reference
character crops. Reference attention carries appearance, a sketch guider
carries structure and an instance guider places each reference's patch
features at its mask. Dense diffusion features give the color hints.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, toy_config
from .data import TrainingSample, build_dataset, load_manifest, write_manifest
from .errors import ConfigError, InvalidInputError, NoMatchError, SketchColorError, StateError, UsageError
from .features import extract_dense_features
from .instance_control import compose_latent_control
from .matching import inject_features, semantic_match
from .metrics import MetricsReport, psnr, ssim
from .model import ColorizationModel, sample
from .pipeline import ablate, colorize, evaluate, run_toy
from .training import StagePlan, train

__version__ = "0.1.0"

__all__ = [
    "ColorizationModel", "Config", "ConfigError", "InvalidInputError", "MetricsReport", "NoMatchError",
    "SketchColorError", "StagePlan", "StateError", "TrainingSample", "UsageError", "ablate", "build_dataset",
    "colorize", "compose_latent_control", "evaluate", "extract_dense_features", "inject_features",
    "load_checkpoint", "load_config", "load_manifest", "psnr", "run_toy", "sample", "save_checkpoint",
    "semantic_match", "ssim", "toy_config", "train", "write_manifest",
]
