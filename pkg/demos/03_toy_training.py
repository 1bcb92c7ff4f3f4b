"""Two-stage training on the sprite set, then colorization of the training inputs.

The default is a short 64x64 run that finishes in a few minutes on CPU.
``--full`` runs the acceptance-scale toy (256x256, 3000 autoencoder steps,
2000 stage-2 steps), which takes about an hour on one CPU core.

Run: python3 demos/03_toy_training.py [--full]
"""

# %%
import argparse
import logging
from pathlib import Path

from sketchcolor.config import toy_config
from sketchcolor.imaging import save_png
from sketchcolor.pipeline import predict_samples, run_toy, score_samples

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

out = Path(__file__).parent / "out" / ("toy_full" if args.full else "toy_small")
out.mkdir(parents=True, exist_ok=True)
if args.full:
    cfg, steps = toy_config(), None
else:
    cfg = toy_config(model={"image_size": 64, "unet_channels": (32, 64, 64), "ae_channels": (16, 16, 32),
                            "patch_channels": 32}, train={"ae_steps": 1500})
    steps = 400

# %% Stage 1 (here: autoencoder fit only) then stage 2 with the instance guider.
run = run_toy(cfg, seed=0, stage2_steps=steps, workdir=out)
print(f"probe loss {run.initial_loss:.4f} -> {run.final_loss:.4f} "
      f"({run.final_loss / run.initial_loss:.1%} of the initial value)")

# %% Colorize every training sketch from its own references and score against ground truth.
scores = score_samples(run.model, run.samples, seed=0)
print({k: round(v, 4) for k, v in scores.items()})
for s, pred in zip(run.samples, predict_samples(run.model, run.samples, seed=0)):
    save_png(out / f"{s.sample_id}_pred.png", pred)
    save_png(out / f"{s.sample_id}_truth.png", s.target)
print("checkpoints and images in", out)
