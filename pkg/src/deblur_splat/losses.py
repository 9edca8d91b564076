"""
Sum-reduced L1 rendering losses, the 3D track loss and track backprojection.

Every loss returns ``(value, gradient)`` so callers can feed the gradient
straight into a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .lie import Pose
from .scene import Camera


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def masked_l1(pred, target, mask):
    """L1 summed over pixels outside ``mask`` (``True`` marks dynamic pixels)."""
    pred, target = _check_pair(pred, target)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {pred.shape[:2]}")
    keep = (~mask)[..., None]
    diff = pred - target
    value = float(np.sum(np.abs(diff) * keep))
    grad = np.sign(diff) * keep
    return value, grad


def full_l1(pred, target):
    pred, target = _check_pair(pred, target)
    diff = pred - target
    return float(np.sum(np.abs(diff))), np.sign(diff)


@dataclass
class TrackSet:
    """Reference 3D positions per tracked point and frame.

    ``positions`` is ``(P, F, 3)``; ``valid`` is ``(P, F)``.
    """

    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def num_frames(self):
        return self.positions.shape[1]


def track_loss(means, refs: TrackSet, frame: int):
    """``sum |x_ref - x|_1`` over valid tracks at ``frame``; one mean per track."""
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    if len(means) != len(refs):
        raise StateError(
            f"track correspondence broken: {len(means)} dynamic Gaussians vs {len(refs)} tracks"
        )
    ok = refs.valid[:, frame][:, None]
    diff = np.where(ok, means - np.where(ok, refs.positions[:, frame], 0.0), 0.0)
    return float(np.sum(np.abs(diff))), np.sign(diff)


def backproject_tracks(tracks2d, depth, poses, cam: Camera, visible=None) -> TrackSet:
    """Lift pixel trajectories into world space.

    ``tracks2d`` is ``(P, F, 2)`` pixel coordinates. ``depth`` is either
    ``(F, H, W)`` depth maps (sampled at the nearest pixel) or ``(P, F)``
    per-point depths. ``poses`` are camera-to-world, one per frame.
    Points with missing depth, non-finite depth or ``visible == False`` are
    flagged invalid.
    """
    tracks2d = np.asarray(tracks2d, dtype=float)
    depth = np.asarray(depth, dtype=float)
    P, F = tracks2d.shape[:2]
    if depth.ndim == 3:
        ui = np.clip(np.rint(tracks2d[..., 0]).astype(int), 0, cam.width - 1)
        vi = np.clip(np.rint(tracks2d[..., 1]).astype(int), 0, cam.height - 1)
        z = depth[np.arange(F)[None, :], vi, ui]
        inside = (
            (tracks2d[..., 0] > -0.5) & (tracks2d[..., 0] < cam.width - 0.5)
            & (tracks2d[..., 1] > -0.5) & (tracks2d[..., 1] < cam.height - 0.5)
        )
    elif depth.shape == (P, F):
        z = depth
        inside = np.ones((P, F), dtype=bool)
    else:
        raise ValueError(f"depth must be (F, H, W) maps or (P, F) values, got {depth.shape}")
    valid = inside & np.isfinite(z) & (z > 0)
    if visible is not None:
        valid &= np.asarray(visible, dtype=bool)
    zs = np.where(valid, z, 0.0)
    x_cam = np.stack(
        [
            (tracks2d[..., 0] - cam.cx) / cam.fx * zs,
            (tracks2d[..., 1] - cam.cy) / cam.fy * zs,
            zs,
        ],
        axis=-1,
    )
    world = np.empty_like(x_cam)
    for f, pose in enumerate(poses):
        world[:, f] = pose.transform(x_cam[:, f])
    world[~valid] = np.nan
    return TrackSet(world, valid)


def project_points(points, pose: Pose, cam: Camera):
    """Pinhole projection of world points; returns ``(uv, z)``."""
    W, tv = pose.world_to_view()
    xc = np.asarray(points, dtype=float) @ W.T + tv
    z = xc[..., 2]
    uv = np.stack([cam.fx * xc[..., 0] / z + cam.cx, cam.fy * xc[..., 1] / z + cam.cy], axis=-1)
    return uv, z


def ssim_loss(pred, target, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """``1 - SSIM`` (Gaussian window, valid region, channel mean) and its gradient in ``pred``."""
    from scipy import ndimage

    from .metrics import _gaussian_window

    pred, target = _check_pair(pred, target)
    win = _gaussian_window(win_size, sigma)
    c1, c2 = k1**2, k2**2
    pad = win_size // 2
    H, W = pred.shape[:2]
    if H <= 2 * pad or W <= 2 * pad:
        raise ValueError(f"image {H}x{W} smaller than the {win_size}x{win_size} SSIM window")
    crop = (slice(pad, H - pad), slice(pad, W - pad))
    filt = lambda im: ndimage.correlate(im, win, mode="reflect")[crop]

    def adj(gc):
        # valid outputs never read reflected samples, so the adjoint is a zero-padded correlation
        full = np.zeros((H, W))
        full[crop] = gc
        return ndimage.correlate(full, win[::-1, ::-1], mode="constant", cval=0.0)

    C = pred.shape[2]
    n_valid = (H - 2 * pad) * (W - 2 * pad)
    total = 0.0
    grad = np.zeros_like(pred)
    for ch in range(C):
        x, y = pred[..., ch], target[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        a1 = 2 * mx * my + c1
        a2 = 2 * sxy + c2
        b1 = mx * mx + my * my + c1
        b2 = sxx + syy + c2
        s = a1 * a2 / (b1 * b2)
        total += s.mean()
        w = 1.0 / (n_valid * C)
        d_sxy = w * 2 * s / a2
        d_sxx = -w * s / b2
        d_mx = w * s * (2 * my / a1 - 2 * mx / b1) - 2 * mx * d_sxx - my * d_sxy
        grad[..., ch] = -(adj(d_mx) + 2 * x * adj(d_sxx) + y * adj(d_sxy))
    return float(1.0 - total / C), grad
