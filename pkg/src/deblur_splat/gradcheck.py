"""
Central finite-difference checks of every hand-written backward pass.

Each check builds a random scene from ``seed``, contracts the forward output
with a random upstream array to get a scalar, and compares analytic
gradients with central differences. Errors are reported per parameter group
as ``max |numeric - analytic| / max |numeric|`` (falling back to the absolute
error when the numeric gradient vanishes).
"""

from __future__ import annotations

import numpy as np

from .blur import CameraTrajectory, ExposureWindow, VirtualSampleSet, synth_blur_dynamic, synth_blur_dynamic_backward
from .deformation import DeformationField
from .lie import Pose, delta_from_tangent, so3_exp
from .losses import TrackSet, full_l1, masked_l1, ssim_loss, track_loss
from .raster import render, render_with_grad
from .scene import DYNAMIC, PARAM_NAMES, STATIC, Camera, Gaussians

STEP = 1e-5
SMALL_CAMERA = Camera(20.0, 20.0, 7.5, 7.5, 16, 16)
BACKGROUND = (0.2, 0.3, 0.1)


def relative_error(numeric, analytic) -> float:
    numeric = np.asarray(numeric, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    scale = np.max(np.abs(numeric)) if numeric.size else 0.0
    err = np.max(np.abs(numeric - analytic)) if numeric.size else 0.0
    return float(err / scale) if scale > 1e-12 else float(err)


def random_scene(rng, n: int, dynamic_fraction: float = 0.0) -> Gaussians:
    """``n`` Gaussians in front of an identity-ish camera, sized to cover a 16x16 view."""
    tags = np.where(rng.uniform(size=n) < dynamic_fraction, DYNAMIC, STATIC)
    return Gaussians(
        means=np.column_stack([rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2.5, 3.5, n)]),
        log_scales=rng.normal(np.log(0.15), 0.3, (n, 3)),
        quats=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(0.0, 1.0, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
        tags=tags,
    )


def random_pose(rng, rot=0.05, trans=0.1) -> Pose:
    return Pose(so3_exp(rng.normal(0, rot, 3)), rng.normal(0, trans, 3))


def _entries(shape, rng, limit):
    idx = list(np.ndindex(*shape))
    if limit is not None and len(idx) > limit:
        pick = rng.choice(len(idx), size=limit, replace=False)
        idx = [idx[k] for k in sorted(pick)]
    return idx


def _fd(f, array, entries, h=STEP):
    out = np.zeros(len(entries))
    for k, ix in enumerate(entries):
        old = array[ix]
        array[ix] = old + h
        fp = f()
        array[ix] = old - h
        fm = f()
        array[ix] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def _fd_tangent(f, h=STEP):
    out = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        out[k] = (f(e) - f(-e)) / (2 * h)
    return out


def check_render(seed: int, n: int = 5, cam: Camera = SMALL_CAMERA) -> dict:
    """Rasterizer gradients for all Gaussian parameters and the camera pose."""
    rng = np.random.default_rng(seed)
    g = random_scene(rng, n)
    pose = random_pose(rng)
    up = rng.normal(size=(cam.height, cam.width, 3))
    _, grads = render_with_grad(g, pose, cam, up, BACKGROUND)
    errors = {}
    for name in PARAM_NAMES:
        arr = getattr(g, name)
        entries = list(np.ndindex(*arr.shape))
        num = _fd(lambda: np.sum(up * render(g, pose, cam, BACKGROUND)), arr, entries)
        ana = np.array([getattr(grads.gaussians, name)[ix] for ix in entries])
        errors[name] = relative_error(num, ana)
    num = _fd_tangent(lambda e: np.sum(up * render(g, pose.compose(delta_from_tangent(e)), cam, BACKGROUND)))
    errors["pose"] = relative_error(num, grads.pose)
    return errors


def random_field(rng, role, depth=2, width=16):
    f = DeformationField(depth, width, pos_freqs=3, time_freqs=2, role=role).initialize(rng)
    for k in f.params:
        f.params[k] = f.params[k] + rng.normal(0.0, 0.05, f.params[k].shape)
    return f


def check_blur(seed: int, n: int = 6, cam: Camera = SMALL_CAMERA, views: int = 4, max_entries: int = 40) -> dict:
    """Blur synthesis gradients through pose interpolation, deformation and rasterization."""
    rng = np.random.default_rng(seed)
    g = random_scene(rng, n, dynamic_fraction=0.5)
    fields = {"static": random_field(rng, "static"), "dynamic": random_field(rng, "dynamic")}
    traj = CameraTrajectory(random_pose(rng), rng.normal(0, 0.02, 6), rng.normal(0, 0.02, 6))
    window = ExposureWindow(0.5, 0.2, views - 1)
    up = rng.normal(size=(cam.height, cam.width, 3))

    def value():
        ss = VirtualSampleSet.from_trajectory(traj, window)
        return float(np.sum(up * synth_blur_dynamic(ss, g, fields, cam, BACKGROUND)))

    bg = synth_blur_dynamic_backward(VirtualSampleSet.from_trajectory(traj, window), g, fields, cam, up, BACKGROUND)
    errors = {}
    for name, arr, ana in (("delta_start", traj.delta_start, bg.delta_start), ("delta_end", traj.delta_end, bg.delta_end)):
        entries = list(np.ndindex(6))
        errors[name] = relative_error(_fd(value, arr, entries), ana)
    for name in PARAM_NAMES:
        arr = getattr(g, name)
        entries = _entries(arr.shape, rng, max_entries)
        ana = np.array([getattr(bg.gaussians, name)[ix] for ix in entries])
        errors[name] = relative_error(_fd(value, arr, entries), ana)
    for role, f in fields.items():
        keys = sorted(f.params)
        picks = [(keys[rng.integers(len(keys))]) for _ in range(8)]
        num, ana = [], []
        for key in picks:
            arr = f.params[key]
            ix = tuple(rng.integers(s) for s in arr.shape)
            num.append(_fd(value, arr, [ix])[0])
            ana.append(bg.fields[role][key][ix])
        errors[f"field_{role}"] = relative_error(num, ana)
    return errors


def check_deformation(seed: int, points: int = 10) -> dict:
    """Field weights (8 random entries) and canonical means (``points`` random points)."""
    rng = np.random.default_rng(seed)
    f = random_field(rng, "dynamic", depth=3, width=24)
    means = rng.uniform(-1, 1, (points, 3))
    t = rng.uniform(0, 1, points)
    G = rng.normal(size=(points, 10))

    def value():
        out, _ = f.forward(means, t)
        return float(np.sum(G * out))

    _, rec = f.forward(means, t)
    pg, g_means = f.backward(rec, G)
    keys = sorted(f.params)
    num, ana = [], []
    for _ in range(8):
        key = keys[rng.integers(len(keys))]
        arr = f.params[key]
        ix = tuple(rng.integers(s) for s in arr.shape)
        num.append(_fd(value, arr, [ix])[0])
        ana.append(pg[key][ix])
    errors = {"weights": relative_error(num, ana)}
    entries = list(np.ndindex(*means.shape))
    errors["means"] = relative_error(_fd(value, means, entries), [g_means[ix] for ix in entries])
    _, grec = f.forward_grid(means[:4], t[:3])
    Gg = rng.normal(size=(12, 10))

    def grid_value():
        out, _ = f.forward_grid(means[:4], t[:3])
        return float(np.sum(Gg * out))

    pgg, gmg = f.backward(grec, Gg)
    entries = list(np.ndindex(4, 3))
    errors["grid_means"] = relative_error(_fd(grid_value, means, entries), [gmg[ix] for ix in entries])
    key = keys[0]
    ix = tuple(rng.integers(s) for s in f.params[key].shape)
    errors["grid_weights"] = relative_error(_fd(grid_value, f.params[key], [ix]), [pgg[key][ix]])
    return errors


def check_losses(seed: int) -> dict:
    """Image L1 (masked and full), SSIM loss and the track loss."""
    rng = np.random.default_rng(seed)
    H = W = 16
    target = rng.uniform(size=(H, W, 3))
    # keep every residual away from the L1 kink so central differences are exact
    offset = rng.choice([-1.0, 1.0], size=target.shape) * rng.uniform(0.05, 0.2, target.shape)
    pred = target + offset
    mask = rng.uniform(size=(H, W)) < 0.3
    errors = {}
    entries = _entries(pred.shape, rng, 60)
    _, g = masked_l1(pred, target, mask)
    errors["masked_l1"] = relative_error(_fd(lambda: masked_l1(pred, target, mask)[0], pred, entries), [g[ix] for ix in entries])
    _, g = full_l1(pred, target)
    errors["full_l1"] = relative_error(_fd(lambda: full_l1(pred, target)[0], pred, entries), [g[ix] for ix in entries])
    smooth = np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1)
    _, g = ssim_loss(smooth, target)
    errors["ssim"] = relative_error(_fd(lambda: ssim_loss(smooth, target)[0], smooth, entries), [g[ix] for ix in entries])
    P, F = 7, 3
    refs = TrackSet(rng.normal(size=(P, F, 3)), rng.uniform(size=(P, F)) < 0.8)
    means = refs.positions[:, 1] + rng.choice([-1.0, 1.0], (P, 3)) * rng.uniform(0.05, 0.2, (P, 3))
    _, g = track_loss(means, refs, 1)
    entries = list(np.ndindex(*means.shape))
    errors["track"] = relative_error(_fd(lambda: track_loss(means, refs, 1)[0], means, entries), [g[ix] for ix in entries])
    return errors


def run_all(seeds=(0, 1, 2), sizes=(5, 12, 20)) -> dict:
    """Every check over a few seeds; scene sizes span the 5 to 20 Gaussian range."""
    report = {}
    for seed, n in zip(seeds, sizes):
        for group, errs in (
            ("render", check_render(seed, n)),
            ("blur", check_blur(seed, max(3, n // 2))),
            ("deformation", check_deformation(seed)),
            ("losses", check_losses(seed)),
        ):
            for k, v in errs.items():
                key = f"{group}.{k}"
                report[key] = max(report.get(key, 0.0), v)
    return report
