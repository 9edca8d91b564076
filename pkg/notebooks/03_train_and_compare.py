"""
Training the full pipeline against the blur-unaware baseline
============================================================

Generates the desk scene from configs/desk_scene.json and trains two
variants of configs/desk_train.json:

- full: each blurry frame is the mean of renders along a learned camera exposure trajectory and at virtual timestamps of the moving object.
- baseline: one sharp pose and one time per frame.

Then it compares their sharp renders with the held-out mid-exposure frames.
This is the comparison the acceptance suite runs. It takes about 15 minutes
on one core.

    python notebooks/03_train_and_compare.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from deblur_splat.dataset import Dataset
from deblur_splat.experiments import ablation_sweep
from deblur_splat.io import read_json, save_png
from deblur_splat.synth import SceneScript, generate
from deblur_splat.trainer import Trainer

configs = Path(__file__).resolve().parents[1] / "configs"
out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_out")
out.mkdir(parents=True, exist_ok=True)

ds_dir = out / "desk"
if not (ds_dir / "manifest.json").exists():
    generate(SceneScript.from_dict(read_json(configs / "desk_scene.json")), ds_dir)
data = Dataset(ds_dir)

base = read_json(configs / "desk_train.json")
base["dataset"] = str(ds_dir)
summary = ablation_sweep(base, out / "sweep", variants=("full", "baseline"), dataset=data)

for name, row in summary["rows"].items():
    print(f"{name:9s} psnr {row['psnr']:.2f}  in mask {row['psnr_dynamic']:.2f}  LV {row['lv']:.1f}")
for c in summary["checks"]:
    print("[PASS]" if c["passed"] else "[FAIL]", c["name"], c["detail"])

# per-frame gain inside the dynamic mask
rows = {n: read_json(out / "sweep" / n / "report.json")["rows"] for n in ("full", "baseline")}
gain = [a["psnr_dynamic"] - b["psnr_dynamic"] for a, b in zip(rows["full"], rows["baseline"])]
print("mask gain per frame:", np.round(gain, 1))

# side by side: blurry input, baseline, full, ground truth
i = len(data) // 2
renders = {}
for name in ("baseline", "full"):
    t = Trainer.from_checkpoint(out / "sweep" / name / "final.ckpt", data)
    renders[name] = t.render_frame(i)
f = data[i]
save_png(out / "compare.png", np.concatenate([f.image, renders["baseline"], renders["full"], f.sharp], axis=1))
print("wrote", out / "compare.png")
