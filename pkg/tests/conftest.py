import numpy as np
import pytest
import torch

from sketchcolor.config import Config


def tiny_config(**sections) -> Config:
    """64x64 images, narrow networks: fast enough for unit tests."""
    cfg = Config().replace(
        model={"image_size": 64, "unet_channels": (16, 32, 32), "ae_channels": (8, 8, 16),
               "patch_channels": 16, "attention_heads": 2, "norm_groups": 4},
        loss={"perceptual_channels": (4, 8)},
        data={"n_sequences": 2, "frames_per_seq": 3, "min_area": 4},
        train={"lr": 1e-3, "steps": 3, "ae_steps": 2, "ae_lr": 1e-3},
        sample={"steps": 3},
    )
    return cfg.replace(**sections) if sections else cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
