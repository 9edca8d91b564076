"""
A synthetic blurry dataset
==========================

Generates a small scene from a script, measures how much blur the object and
the camera produce, and checks the oracles the generator writes next to the
images (mask, tracks).

    python notebooks/02_synthetic_scene.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from deblur_splat.dataset import Dataset
from deblur_splat.io import save_png
from deblur_splat.metrics import laplacian_variance, psnr
from deblur_splat.synth import SceneScript, generate, motion_extents

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_out")
out.mkdir(parents=True, exist_ok=True)

script = SceneScript.from_dict({
    "width": 64,
    "height": 64,
    "focal": 70.0,
    "num_frames": 8,
    "sub_samples": 8,
    "objects": [{"radius": 0.25, "trajectory": {"kind": "circular", "center": [0.0, 0.0, 3.0],
                                               "radius": 0.5, "revolutions": 0.75}}],
})
script.validate()

# blur severity in pixels per exposure, before rendering anything
ext = motion_extents(script)
print("object streak px:", np.round(ext["object_streak"], 2))
print("camera shake  px:", np.round(ext["camera_shake"], 2))

ds_dir = out / "scene"
generate(script, ds_dir)
ds = Dataset(ds_dir)

# blurry input vs the sharp mid-exposure frame, overall and on the object
for f in ds.frames[:4]:
    print(f"frame {f.index}: psnr {psnr(f.image, f.sharp):.2f}  "
          f"in mask {psnr(f.image, f.sharp, f.mask):.2f}  "
          f"LV blurry {laplacian_variance(f.image):.1f} sharp {laplacian_variance(f.sharp):.1f}")

# 2D tracks sit on the object in the canonical frame
c = ds.canonical_frame
uv = ds.tracks2d[:, c]
inside = ds.frames[c].mask[np.clip(np.rint(uv[:, 1]).astype(int), 0, 63), np.clip(np.rint(uv[:, 0]).astype(int), 0, 63)]
print(f"{len(uv)} tracks, {inside.mean():.0%} start inside the mask")

f = ds.frames[c]
save_png(out / "scene_strip.png", np.concatenate([f.image, f.sharp, np.repeat(f.mask[..., None], 3, -1) * 1.0], axis=1))
print("wrote", out / "scene_strip.png")
