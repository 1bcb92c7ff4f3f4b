"""Tour of the synthetic sprite data: frames, line art, instance masks, reference sheets.

Run: python3 demos/01_sprite_data.py  (writes PNGs to demos/out/data)
"""

# %%
from pathlib import Path

import numpy as np

from sketchcolor.config import toy_config
from sketchcolor.data import build_dataset, generate_sprite_dataset, sample_frame_pair
from sketchcolor.imaging import save_png

out = Path(__file__).parent / "out" / "data"
out.mkdir(parents=True, exist_ok=True)
cfg = toy_config(model={"image_size": 128})

# %% A sequence is a few frames of the same flat-colored sprites moving and turning.
seqs = generate_sprite_dataset(2, 4, np.random.default_rng(0), size=128)
seq = seqs[0]
print(f"sequence {seq.sequence_id}: {len(seq.frames)} frames, {len(seq.colors)} sprites")
for i, frame in enumerate(seq.frames):
    save_png(out / f"frame{i}.png", frame)

# %% Training pairs take two distinct frames of one sequence, in either order.
ref, target = sample_frame_pair(seq, np.random.default_rng(1))
print("pair differs:", not np.array_equal(ref, target))

# %% Stage 1 samples: sketch from the target, the whole (augmented) reference frame as the sheet.
s1 = build_dataset(cfg, 1, seed=0)[0]
save_png(out / "s1_sketch.png", s1.sketch)
save_png(out / "s1_sheet.png", s1.reference_sheet)
print("stage 1 edge weights (latent grid):")
print(s1.edge_weights)

# %% Stage 2 samples: per-instance crops on a white sheet plus target-frame masks.
s2 = build_dataset(cfg, 2, seed=0)[0]
save_png(out / "s2_target.png", s2.target)
save_png(out / "s2_sheet.png", s2.reference_sheet)
for i, r in enumerate(s2.instances):
    save_png(out / f"s2_ref{i}.png", r.image)
    save_png(out / f"s2_mask{i}.png", r.mask.mask)
    print(f"instance {i}: crop {r.image.shape[:2]}, box {r.mask.box}, area {r.mask.area}")
print("wrote", sorted(p.name for p in out.iterdir()))
