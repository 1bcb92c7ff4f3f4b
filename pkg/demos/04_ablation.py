"""Scaled-down ablation: the full model against each component switched off.

Every row is a separate toy run sharing one pretrained autoencoder, scored
on edge-region MSE (latent boundary cells of the instance masks) and on
per-instance circular hue error.

Run: python3 demos/04_ablation.py [--seed N] [--steps N]
"""

# %%
import argparse
import logging

from sketchcolor.config import toy_config
from sketchcolor.data import build_dataset
from sketchcolor.pipeline import ablate, format_table
from sketchcolor.training import StagePlan, start_model

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--steps", type=int, default=400)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = toy_config(model={"image_size": 64, "unet_channels": (32, 64, 64), "ae_channels": (16, 16, 32),
                        "patch_channels": 32}, train={"ae_steps": 1500})

# %% Fit the autoencoder once; every ablation row reuses it.
ae_model, _, _ = start_model(cfg, StagePlan.for_stage(1, cfg, 0), build_dataset(cfg, 1, args.seed))

# %% One toy run per toggle set.
rows = ablate(cfg.replace(train={"ae_steps": 0}), seed=args.seed, stage2_steps=args.steps,
              autoencoder_from=ae_model)
print(format_table(rows))
