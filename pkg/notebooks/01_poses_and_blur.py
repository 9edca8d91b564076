"""
Poses, exposure trajectories and the blur model
===============================================

Walks through the pieces that turn a sharp Gaussian scene into a blurry
image: the SO(3)/SE(3) maps, geodesic interpolation between the two exposure
endpoints, and the mean over virtual views.

    python notebooks/01_poses_and_blur.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from deblur_splat import gradcheck
from deblur_splat.blur import CameraTrajectory, ExposureWindow, VirtualSampleSet, synth_blur_dynamic
from deblur_splat.io import save_png
from deblur_splat.lie import Pose, interpolate_pose_sequence, midpoint_pose, rotation_angle, so3_exp, so3_log
from deblur_splat.raster import render
from deblur_splat.scene import Camera

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_out")
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

# exp and log are inverse inside the ball of radius pi
w = rng.normal(size=3)
print("omega      ", w)
print("log(exp(w))", so3_log(so3_exp(w)))

# geodesic interpolation: the rotation angle grows linearly with the fraction
a, b = Pose.identity(), Pose(so3_exp([0.0, 0.3, 0.0]), [0.2, 0.0, 0.0])
for p in interpolate_pose_sequence(a, b, 5):
    print(f"angle {rotation_angle(p.rotation):.4f}  translation {np.round(p.translation, 4)}")
mid = midpoint_pose(a, b)
print("midpoint angle", rotation_angle(mid.rotation), "(half of", rotation_angle(b.rotation), ")")

# a random scene and a camera that slides during the exposure
cam = Camera(60.0, 60.0, 31.5, 31.5, 64, 64)
g = gradcheck.random_scene(rng, 40)
traj = CameraTrajectory(Pose.identity(), np.array([0, 0, 0, -0.08, 0, 0.0]), np.array([0, 0, 0, 0.08, 0, 0.0]))
samples = VirtualSampleSet.from_trajectory(traj, ExposureWindow(0.5, 0.1, 8))
sharp = render(g, traj.mid_pose(), cam)  # what the deblurred model should produce
blurry = synth_blur_dynamic(samples, g, {}, cam)

# the blur is exactly the mean of the per-view renders
views = [render(g, p, cam) for p in samples.poses]
print("max |blur - mean of views| =", np.max(np.abs(blurry - np.mean(views, axis=0))))

save_png(out / "blur_strip.png", np.concatenate([views[0], sharp, blurry, views[-1]], axis=1))
print("wrote", out / "blur_strip.png")
