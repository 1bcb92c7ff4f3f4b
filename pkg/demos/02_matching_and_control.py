"""Dense matching and the latent control signal on an (untrained) small model.

The matcher and the ROI placement are deterministic functions of the
features, so they can be inspected before any training.

Run: python3 demos/02_matching_and_control.py
"""

# %%
from pathlib import Path

import numpy as np

from sketchcolor.config import toy_config
from sketchcolor.data import build_dataset
from sketchcolor.features import extract_dense_features
from sketchcolor.imaging import save_png
from sketchcolor.matching import ColorFeaturePair, inject_features, semantic_match, transfer_color_hints
from sketchcolor.model import ColorizationModel

out = Path(__file__).parent / "out" / "control"
out.mkdir(parents=True, exist_ok=True)
cfg = toy_config(model={"image_size": 64, "unet_channels": (16, 32, 32), "ae_channels": (8, 8, 16),
                        "patch_channels": 16, "attention_heads": 2, "norm_groups": 4})
model = ColorizationModel(cfg, seed=0)
sample = build_dataset(cfg, 2, seed=3)[0]

# %% Dense features of the target and of the reference sheet, one vector per latent cell.
ft = extract_dense_features(model, model.image_tensor(sample.target))
fr = extract_dense_features(model, model.image_tensor(sample.reference_sheet))
print("feature grids:", ft.shape, fr.shape, "width", ft.features.shape[-1])

# %% Exhaustive nearest neighbour per target cell; ties go to the lowest flat index.
cm = semantic_match(ColorFeaturePair.from_maps(ft, fr), "cosine")
print("match of cell (3, 3):", tuple(int(v) for v in cm.index[3, 3]), "distance", round(float(cm.distance[3, 3]), 4))
print("inject_features agrees:", inject_features(ft, fr, (3, 3)) == tuple(cm.index[3, 3]))

# %% Color hints: the reference color found at each matched cell.
hints = transfer_color_hints(ft, fr, sample.reference_sheet, stride=1)
hint_img = np.ones((*hints.shape, 3))
hint_img[hints.rows, hints.cols] = hints.colors
save_png(out / "hints.png", np.kron(hint_img, np.ones((8, 8, 1))))

# %% Latent control: each instance's patch grid is stretched over its mask's latent box.
sig = model.latent_control(sample.instances)
norm = np.linalg.norm(sig[0].double().numpy(), axis=0)
print("control coverage (cells with signal):")
print((norm > 0).astype(int))
save_png(out / "control_norm.png", np.kron(norm / max(norm.max(), 1e-12), np.ones((8, 8))))
