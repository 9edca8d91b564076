"""
Blurry-image synthesis from virtual sharp renders.

A blurry observation is modelled as the mean of ``n + 1`` sharp renders at
virtual camera poses interpolated across the exposure and, for dynamic
content, at virtual timestamps spread uniformly over the same window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deformation import deform_gaussians_grid, deform_gaussians_grid_vjp
from .lie import (
    Pose,
    apply_delta,
    delta_from_tangent,
    delta_vjp,
    interpolate_pose_sequence,
    midpoint_pose,
    pose_sequence_vjp,
)
from .raster import DEFAULT_T_MIN, backward_pass, forward_pass, render
from .scene import DYNAMIC, Camera, Gaussians, GaussianGrads


@dataclass(frozen=True)
class ExposureWindow:
    """Shutter interval ``[center - duration/2, center + duration/2]`` sampled at ``n + 1`` times."""

    center: float
    duration: float
    n: int

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"exposure duration must be positive, got {self.duration}")
        if self.n < 1:
            raise ValueError(f"need at least two virtual samples (n >= 1), got n={self.n}")

    def clamped(self, lo: float = 0.0, hi: float = 1.0) -> "ExposureWindow":
        """Shrink the duration symmetrically so the window fits in ``[lo, hi]``."""
        half = min(0.5 * self.duration, self.center - lo, hi - self.center)
        if half <= 0:
            raise ValueError(f"window center {self.center} lies outside [{lo}, {hi}]")
        return ExposureWindow(self.center, 2.0 * half, self.n)


def virtual_timestamps(window: ExposureWindow) -> np.ndarray:
    j = np.arange(window.n + 1)
    return window.center - 0.5 * window.duration + j * (window.duration / window.n)


@dataclass
class CameraTrajectory:
    """Exposure endpoints as learnable right-deltas on an initial pose."""

    base: Pose
    delta_start: np.ndarray = field(default_factory=lambda: np.zeros(6))
    delta_end: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def endpoints(self):
        return (
            apply_delta(self.base, delta_from_tangent(self.delta_start)),
            apply_delta(self.base, delta_from_tangent(self.delta_end)),
        )

    def poses(self, n: int) -> list[Pose]:
        return interpolate_pose_sequence(*self.endpoints(), n)

    def mid_pose(self) -> Pose:
        return midpoint_pose(*self.endpoints())

    def vjp(self, fractions, pose_grads):
        """Right-tangent gradients of the sampled poses to the two delta vectors."""
        p0, pn = self.endpoints()
        g0, gn = pose_sequence_vjp(p0, pn, fractions, pose_grads)
        return delta_vjp(self.base, self.delta_start, g0), delta_vjp(self.base, self.delta_end, gn)


@dataclass
class VirtualSampleSet:
    """Paired virtual poses and timestamps for one exposure."""

    poses: list
    times: np.ndarray
    trajectory: CameraTrajectory | None = None
    fractions: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if len(self.poses) != len(self.times):
            raise ValueError(
                f"virtual pose count {len(self.poses)} != virtual time count {len(self.times)}"
            )
        if self.fractions is None and len(self.poses) > 1:
            self.fractions = np.linspace(0.0, 1.0, len(self.poses))
        elif self.fractions is None:
            self.fractions = np.array([0.5])

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_trajectory(cls, trajectory: CameraTrajectory, window: ExposureWindow, *,
                        camera_motion=True, object_motion=True) -> "VirtualSampleSet":
        """Build the set used in training; the flags switch off either blur source.

        Without camera motion every sample sits at the trajectory's start
        endpoint, which then acts as a single refinable sharp pose (all pose
        gradient flows to ``delta_start``). Without object motion every sample
        uses the window center time. With both off a single sample remains.
        """
        n = window.n
        if not camera_motion:
            p0 = trajectory.endpoints()[0]
            k = n + 1 if object_motion else 1
            times = virtual_timestamps(window) if object_motion else [window.center]
            return cls([p0] * k, times, trajectory, np.zeros(k))
        times = virtual_timestamps(window) if object_motion else np.full(n + 1, window.center)
        return cls(trajectory.poses(n), times, trajectory, np.arange(n + 1) / n)


@dataclass
class BlurGradients:
    gaussians: GaussianGrads
    fields: dict
    poses: np.ndarray
    delta_start: np.ndarray | None
    delta_end: np.ndarray | None
    means2d_norm: np.ndarray


def synth_blur_static(p_start: Pose, p_end: Pose, n: int, static_gaussians: Gaussians, cam: Camera,
                      background=None, t_min=DEFAULT_T_MIN):
    """Mean of ``n + 1`` renders along the interpolated camera path."""
    if np.any(static_gaussians.tags == DYNAMIC):
        raise ValueError("synth_blur_static received dynamic-tagged Gaussians")
    acc = np.zeros((cam.height, cam.width, 3))
    for pose in interpolate_pose_sequence(p_start, p_end, n):
        acc += render(static_gaussians, pose, cam, background, t_min)
    return acc / (n + 1)


def _active(fields):
    return {k: f for k, f in (fields or {}).items() if f is not None}


def _deformed_samples(sample_set: VirtualSampleSet, gaussians: Gaussians, fields):
    fields = _active(fields)
    m = len(sample_set)
    if not fields:
        return [gaussians] * m, None
    n = len(gaussians)
    deformed, record = deform_gaussians_grid(gaussians, fields, sample_set.times)
    return [deformed.subset(slice(j * n, (j + 1) * n)) for j in range(m)], record


def synth_blur_dynamic(sample_set: VirtualSampleSet, gaussians: Gaussians, fields, cam: Camera,
                       background=None, t_min=DEFAULT_T_MIN):
    """Mean over samples of the scene deformed to ``times[j]`` seen from ``poses[j]``."""
    scenes, _ = _deformed_samples(sample_set, gaussians, fields)
    acc = np.zeros((cam.height, cam.width, 3))
    for scene, pose in zip(scenes, sample_set.poses):
        acc += render(scene, pose, cam, background, t_min)
    return acc / len(sample_set)


def _accumulate(sample_set, gaussians, fields, deform_state, passes, cam, up) -> BlurGradients:
    m = len(sample_set)
    n = len(gaussians)
    per_sample = []
    pose_grads = np.zeros((m, 6))
    means2d_norm = np.zeros(n)
    for j, rp in enumerate(passes):
        rg = backward_pass(rp, cam, up)
        per_sample.append(rg.gaussians)
        pose_grads[j] = rg.pose
        means2d_norm += rg.means2d_norm
    if deform_state is None:
        total = GaussianGrads.zeros(n)
        for gj in per_sample:
            total += gj
        field_grads = {}
    else:
        stacked_grads = GaussianGrads(
            **{k: np.concatenate([getattr(gj, k) for gj in per_sample]) for k in GaussianGrads.zeros(0).as_dict()}
        )
        total, field_grads = deform_gaussians_grid_vjp(gaussians, fields, deform_state, stacked_grads)
    g_start = g_end = None
    if sample_set.trajectory is not None:
        g_start, g_end = sample_set.trajectory.vjp(sample_set.fractions, pose_grads)
    return BlurGradients(total, field_grads, pose_grads, g_start, g_end, means2d_norm)


def synth_blur_dynamic_backward(sample_set: VirtualSampleSet, gaussians: Gaussians, fields, cam: Camera,
                                upstream, background=None, t_min=DEFAULT_T_MIN) -> BlurGradients:
    """Gradients of ``sum(upstream * blur)`` w.r.t. canonical Gaussians, field
    weights, each virtual pose and (when the set carries a trajectory) the two
    exposure deltas. Per-sample forwards are recomputed, not stored."""
    fields = _active(fields)
    scenes, deform_state = _deformed_samples(sample_set, gaussians, fields)
    passes = [forward_pass(sc, pose, cam, background, t_min) for sc, pose in zip(scenes, sample_set.poses)]
    up = np.asarray(upstream, dtype=float) / len(sample_set)
    return _accumulate(sample_set, gaussians, fields, deform_state, passes, cam, up)


def blur_loss_and_grad(sample_set: VirtualSampleSet, gaussians: Gaussians, fields, cam: Camera, loss_fn,
                       background=None, t_min=DEFAULT_T_MIN):
    """Synthesize the blurry image, evaluate ``loss_fn(image) -> (value, dL/dimage)``
    and backpropagate in one pass. Returns ``(image, value, BlurGradients)``."""
    fields = _active(fields)
    scenes, deform_state = _deformed_samples(sample_set, gaussians, fields)
    passes = [forward_pass(sc, pose, cam, background, t_min) for sc, pose in zip(scenes, sample_set.poses)]
    m = len(sample_set)
    image = passes[0].image.copy()
    for rp in passes[1:]:
        image += rp.image
    image /= m
    value, g_image = loss_fn(image)
    up = np.asarray(g_image, dtype=float) / m
    return image, value, _accumulate(sample_set, gaussians, fields, deform_state, passes, cam, up)
