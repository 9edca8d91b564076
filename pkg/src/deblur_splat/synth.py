"""
Ground-truth scenes and blurry-dataset generation.

Scenes are Gaussian clusters: a textured background plane plus rigid
objects that follow parametric trajectories. Each frame averages ``m``
sharp renders taken at uniform times inside the exposure, and the
generator emits exact oracles alongside: mid-exposure sharp image,
dynamic mask, depth, 2D tracks and their 3D ground truth.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .io import save_image, write_json
from .lie import Pose, quat_multiply, so3_exp, so3_log
from .losses import project_points
from .raster import render, render_dominant
from .scene import DYNAMIC, NEAR_PLANE, STATIC, Camera, Gaussians, logit, project_gaussians

log = logging.getLogger(__name__)

PALETTE = np.array(
    [
        [0.90, 0.85, 0.70],
        [0.20, 0.35, 0.55],
        [0.75, 0.30, 0.20],
        [0.25, 0.55, 0.30],
        [0.95, 0.75, 0.20],
        [0.15, 0.15, 0.20],
        [0.60, 0.60, 0.65],
    ]
)


@dataclass
class Trajectory:
    """Object path over normalized sequence time ``t in [0, 1]``.

    kinds: ``static`` (``center``), ``linear`` (``center + velocity * t``),
    ``circular`` (``center`` plus a circle of ``radius`` in the view plane,
    ``revolutions`` turns over the sequence starting at ``phase``) and
    ``spline`` (Catmull-Rom through ``points``, C1-continuous).
    """

    kind: str = "circular"
    center: list = field(default_factory=lambda: [0.0, 0.0, 3.0])
    velocity: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 0.6
    revolutions: float = 1.5
    phase: float = 0.0
    points: list = field(default_factory=list)

    def position(self, t: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        if self.kind == "static":
            return c
        if self.kind == "linear":
            return c + np.asarray(self.velocity, dtype=float) * t
        if self.kind == "circular":
            a = self.phase + 2.0 * np.pi * self.revolutions * t
            return c + self.radius * np.array([np.cos(a), np.sin(a), 0.0])
        if self.kind == "spline":
            return _catmull_rom(np.asarray(self.points, dtype=float), t)
        raise DataError(f"unknown trajectory kind {self.kind!r}")


def _catmull_rom(pts, t):
    n_seg = len(pts) - 3
    s = np.clip(t, 0.0, 1.0) * n_seg
    i = min(int(s), n_seg - 1)
    u = s - i
    p0, p1, p2, p3 = pts[i : i + 4]
    return 0.5 * (
        2 * p1 + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2 + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3
    )


@dataclass
class ObjectSpec:
    """A rigid disk of Gaussians in its local xy plane, striped in two colors."""

    radius: float = 0.25
    spacing: float = 0.07
    scale: float = 0.045
    colors: list = field(default_factory=lambda: [[0.95, 0.20, 0.15], [0.98, 0.92, 0.30]])
    stripe_width: float = 0.1
    angular_velocity: float = 0.0
    trajectory: Trajectory = field(default_factory=Trajectory)

    def local_gaussians(self) -> Gaussians:
        ax = np.arange(-self.radius, self.radius + 1e-9, self.spacing)
        xx, yy = np.meshgrid(ax, ax, indexing="xy")
        keep = xx**2 + yy**2 <= self.radius**2 + 1e-12
        xs, ys = xx[keep], yy[keep]
        n = len(xs)
        stripe = (np.floor(xs / self.stripe_width).astype(int) % 2).astype(int)
        cols = np.asarray(self.colors, dtype=float)[stripe]
        return Gaussians(
            means=np.stack([xs, ys, np.zeros(n)], axis=1),
            log_scales=np.full((n, 3), np.log(self.scale)),
            quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            opacity_logits=np.full(n, logit(0.99)),
            colors=cols,
            tags=np.full(n, DYNAMIC),
        )

    def transform(self, t: float) -> Pose:
        return Pose(so3_exp([0.0, 0.0, self.angular_velocity * t]), self.trajectory.position(t))


@dataclass
class BackgroundSpec:
    """
    Textured wall near view depth ``depth``: blocky palette patches on a
    Gaussian grid. Each block sits at its own depth offset (up to
    ``relief``) and each splat gets a small ``jitter`` so that no two
    overlapping splats share a depth and their order is stable under small
    viewpoint changes.
    """

    depth: float = 4.0
    half_extent: float = 2.6
    spacing: float = 0.1
    scale: float = 0.06
    block: int = 3
    relief: float = 0.3
    jitter: float = 0.02


@dataclass
class CameraPath:
    """Sinusoidal hand-shake around a fixed position looking down +z."""

    position: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    shake_amplitude: list = field(default_factory=lambda: [0.22, 0.16, 0.0])
    shake_cycles: list = field(default_factory=lambda: [3.0, 2.0, 1.0])
    rotation_amplitude_deg: list = field(default_factory=lambda: [0.3, 0.3, 0.2])
    rotation_cycles: list = field(default_factory=lambda: [2.0, 3.0, 1.5])

    def pose(self, t: float) -> Pose:
        amp = np.asarray(self.shake_amplitude, dtype=float)
        cyc = np.asarray(self.shake_cycles, dtype=float)
        pos = np.asarray(self.position, dtype=float) + amp * np.sin(2 * np.pi * cyc * t + np.array([0.0, 1.3, 2.1]))
        ramp = np.deg2rad(np.asarray(self.rotation_amplitude_deg, dtype=float))
        rcyc = np.asarray(self.rotation_cycles, dtype=float)
        rot = ramp * np.sin(2 * np.pi * rcyc * t + np.array([0.4, 2.2, 1.0]))
        return Pose(so3_exp(rot), pos)


@dataclass
class SceneScript:
    width: int = 96
    height: int = 96
    focal: float = 100.0
    num_frames: int = 24
    exposure: float = 0.8
    sub_samples: int = 16
    seed: int = 0
    background_color: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    objects: list = field(default_factory=lambda: [ObjectSpec()])
    camera: CameraPath = field(default_factory=CameraPath)
    mask_threshold: float = 0.05
    mask_dilation: int = 1
    track_stride: int = 2
    pose_noise_deg: float = 0.5
    pose_noise_translation: float = 0.02
    noise_seed: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown scene-script keys: {sorted(unknown)}")
        if "background" in d:
            d["background"] = BackgroundSpec(**d["background"])
        if "camera" in d:
            d["camera"] = CameraPath(**d["camera"])
        if "objects" in d:
            objs = []
            for o in d["objects"]:
                o = dict(o)
                if "trajectory" in o:
                    o["trajectory"] = Trajectory(**o["trajectory"])
                objs.append(ObjectSpec(**o))
            d["objects"] = objs
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def camera_model(self) -> Camera:
        return Camera(self.focal, self.focal, self.width / 2.0, self.height / 2.0, self.width, self.height)

    def frame_time(self, i: int) -> float:
        return (i + 0.5) / self.num_frames

    @property
    def exposure_duration(self) -> float:
        return self.exposure / self.num_frames

    def validate(self) -> None:
        errors = []
        if not self.exposure > 0:
            errors.append(f"exposure must be positive, got {self.exposure}")
        if self.exposure > 1:
            errors.append(f"exposure may not exceed the frame interval, got {self.exposure}")
        if self.num_frames < 2:
            errors.append("need at least two frames")
        if self.sub_samples < 2:
            errors.append("need at least two sub-exposure samples")
        if self.width < 16 or self.height < 16:
            errors.append("resolution must be at least 16x16")
        for k, o in enumerate(self.objects):
            tr = o.trajectory
            if tr.kind not in ("static", "linear", "circular", "spline"):
                errors.append(f"object {k}: unknown trajectory kind {tr.kind!r}")
                continue
            if tr.kind == "spline" and len(tr.points) < 4:
                errors.append(f"object {k}: spline trajectory needs >= 4 points")
                continue
            for t in np.linspace(0.0, 1.0, 65):
                cam_pose = self.camera.pose(t)
                z = cam_pose.inverse().transform(tr.position(t))[2]
                if z - o.radius <= 10 * NEAR_PLANE:
                    errors.append(f"object {k}: trajectory leaves the camera frustum depth range at t={t:.3f}")
                    break
        if errors:
            raise DataError("; ".join(errors))


class ScriptedScene:
    """Ground-truth scene: static plane plus rigidly moving objects."""

    def __init__(self, script: SceneScript):
        self.script = script
        rng = np.random.default_rng(script.seed)
        self.static = _background_gaussians(script.background, rng)
        self.objects = script.objects
        self.local = [o.local_gaussians() for o in self.objects]
        ids = [np.full(len(self.static), -1)] + [np.full(len(g), k) for k, g in enumerate(self.local)]
        self.object_ids = np.concatenate(ids)

    def object_gaussians(self, k: int, t: float) -> Gaussians:
        T = self.objects[k].transform(t)
        g = self.local[k]
        return g.replace(means=T.transform(g.means), quats=quat_multiply(T.rotation, g.quats))

    def at_time(self, t: float) -> Gaussians:
        return Gaussians.concat([self.static] + [self.object_gaussians(k, t) for k in range(len(self.objects))])

    def dynamic_at_time(self, t: float) -> Gaussians:
        return Gaussians.concat([self.object_gaussians(k, t) for k in range(len(self.objects))])


def _background_gaussians(spec: BackgroundSpec, rng) -> Gaussians:
    ax = np.arange(-spec.half_extent, spec.half_extent + 1e-9, spec.spacing)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")
    n_side = len(ax)
    n_blocks = (n_side + spec.block - 1) // spec.block
    block_color = rng.integers(0, len(PALETTE), size=(n_blocks, n_blocks))
    bi = np.arange(n_side) // spec.block
    cols = PALETTE[block_color[bi[:, None], bi[None, :]]]
    cols = np.clip(cols + rng.normal(0.0, 0.03, cols.shape), 0.0, 1.0)
    block_depth = rng.uniform(0.0, spec.relief, size=(n_blocks, n_blocks))
    zz = spec.depth + block_depth[bi[:, None], bi[None, :]] + rng.normal(0.0, spec.jitter, xx.shape)
    n = xx.size
    return Gaussians(
        means=np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1),
        log_scales=np.tile(np.log([spec.scale, spec.scale, spec.scale * 0.5]), (n, 1)),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(0.99)),
        colors=cols.reshape(n, 3),
        tags=np.full(n, STATIC),
    )


def dynamic_footprint(gaussians: Gaussians, pose: Pose, cam: Camera, threshold: float):
    """Pixels where any dynamic Gaussian's own alpha reaches ``threshold``."""
    dyn = gaussians.subset(gaussians.is_dynamic)
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if len(dyn) == 0:
        return mask
    proj = project_gaussians(dyn, pose, cam)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    for i in np.flatnonzero(proj.valid):
        u, v = proj.means2d[i]
        rx, ry = proj.radii[i]
        a, b, c = proj.conics[i]
        dx, dy = xs - u, ys - v
        inside = (np.abs(dx) <= rx) & (np.abs(dy) <= ry)
        alpha = proj.opacities[i] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
        mask |= inside & (alpha >= threshold)
    return mask


def motion_extents(script: SceneScript) -> dict:
    """Per-frame blur severity in pixels over each exposure.

    ``object_streak``: largest image displacement of any object Gaussian
    between exposure start and end (camera and object motion combined).
    ``camera_shake``: mean image displacement of the visible background
    Gaussians caused by the camera alone.
    """
    scene = ScriptedScene(script)
    cam = script.camera_model
    tau = script.exposure_duration
    streak, shake = [], []
    for i in range(script.num_frames):
        t = script.frame_time(i)
        a, b = t - tau / 2, t + tau / 2
        pa, pb = script.camera.pose(a), script.camera.pose(b)
        if scene.objects:
            ua, _ = project_points(scene.dynamic_at_time(a).means, pa, cam)
            ub, _ = project_points(scene.dynamic_at_time(b).means, pb, cam)
            streak.append(float(np.max(np.linalg.norm(ub - ua, axis=1))))
        ua, za = project_points(scene.static.means, pa, cam)
        ub, _ = project_points(scene.static.means, pb, cam)
        seen = (za > NEAR_PLANE) & (ua[:, 0] >= 0) & (ua[:, 0] < cam.width) & (ua[:, 1] >= 0) & (ua[:, 1] < cam.height)
        shake.append(float(np.mean(np.linalg.norm(ub[seen] - ua[seen], axis=1))))
    return {"object_streak": streak, "camera_shake": shake}


def perturb_poses(manifest: dict, sigma_deg: float, sigma_t: float, seed: int) -> dict:
    """Copy of ``manifest`` whose frames carry ``initial_pose`` = true mid pose
    composed with a zero-mean Gaussian tangent perturbation."""
    if sigma_deg < 0 or sigma_t < 0:
        raise ValueError("noise standard deviations must be non-negative")
    rng = np.random.default_rng(seed)
    out = dict(manifest)
    frames = []
    for fr in manifest["frames"]:
        fr = dict(fr)
        true_mid = Pose.from_array(fr["true_mid_pose"])
        rot = rng.normal(0.0, np.deg2rad(sigma_deg), 3)
        tr = rng.normal(0.0, sigma_t, 3)
        fr["initial_pose"] = true_mid.compose(Pose(so3_exp(rot), tr)).to_array().tolist()
        frames.append(fr)
    out["frames"] = frames
    out["pose_noise"] = {"rotation_deg": sigma_deg, "translation": sigma_t, "seed": seed}
    return out


def _track_points(scene: ScriptedScene, script: SceneScript, mask, pose: Pose, t: float):
    """Seed points on strided mask pixels, attached to whichever object is visible there."""
    cam = script.camera_model
    g = scene.at_time(t)
    dominant, depth, _ = render_dominant(g, pose, cam)
    stride = script.track_stride
    ys, xs = np.nonzero(mask)
    keep = (xs % stride == 0) & (ys % stride == 0)
    xs, ys = xs[keep], ys[keep]
    hit = dominant[ys, xs] >= 0
    z = np.where(hit, depth[ys, xs], np.nan)
    cam_pts = np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z], axis=1)
    world = pose.transform(cam_pts)
    owner = np.where(hit, scene.object_ids[np.maximum(dominant[ys, xs], 0)], -1)
    local = world.copy()
    for k in np.unique(owner[owner >= 0]):
        sel = owner == k
        local[sel] = scene.objects[k].transform(t).inverse().transform(world[sel])
    return np.stack([xs, ys], axis=1), owner, local


def _point_positions(scene: ScriptedScene, owner, local, t: float):
    out = local.copy()
    for k in np.unique(owner[owner >= 0]):
        sel = owner == k
        out[sel] = scene.objects[k].transform(t).transform(local[sel])
    return out


def generate(script: SceneScript, out_dir) -> dict:
    """Render the dataset described by ``script`` into ``out_dir``; returns the manifest."""
    script.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cam = script.camera_model
    scene = ScriptedScene(script)
    tau = script.exposure_duration
    m = script.sub_samples
    bg = script.background_color
    F = script.num_frames
    canonical = F // 2
    frames = []
    masks = []
    depths = []
    for i in range(F):
        t = script.frame_time(i)
        sub_times = np.linspace(t - tau / 2, t + tau / 2, m)
        acc = np.zeros((cam.height, cam.width, 3))
        mask = np.zeros((cam.height, cam.width), dtype=bool)
        for ts in sub_times:
            pose = script.camera.pose(ts)
            g = scene.at_time(ts)
            acc += render(g, pose, cam, bg)
            mask |= dynamic_footprint(g, pose, cam, script.mask_threshold)
        blurry = acc / m
        if script.mask_dilation > 0:
            mask = ndimage.binary_dilation(mask, iterations=script.mask_dilation)
        mid_pose = script.camera.pose(t)
        g_mid = scene.at_time(t)
        sharp = render(g_mid, mid_pose, cam, bg)
        _, depth, _ = render_dominant(g_mid, mid_pose, cam)
        stem = f"{i:03d}"
        blurry_npy, blurry_png = save_image(out / f"blurry_{stem}", blurry)
        sharp_npy, sharp_png = save_image(out / f"sharp_{stem}", sharp)
        np.save(out / f"mask_{stem}.npy", mask)
        np.save(out / f"depth_{stem}.npy", depth.astype("<f4"))
        masks.append(mask)
        depths.append(depth)
        frames.append(
            {
                "index": i,
                "time": t,
                "exposure": tau,
                "blurry": blurry_npy,
                "blurry_png": blurry_png,
                "sharp": sharp_npy,
                "sharp_png": sharp_png,
                "mask": f"mask_{stem}.npy",
                "depth": f"depth_{stem}.npy",
                "true_start_pose": script.camera.pose(t - tau / 2).to_array().tolist(),
                "true_end_pose": script.camera.pose(t + tau / 2).to_array().tolist(),
                "true_mid_pose": mid_pose.to_array().tolist(),
            }
        )

    t_c = script.frame_time(canonical)
    pix, owner, local = _track_points(scene, script, masks[canonical], script.camera.pose(t_c), t_c)
    P = len(pix)
    if P == 0:
        log.warning("no dynamic pixels at the canonical frame; no tracks emitted")
    tracks3d = np.zeros((P, F, 3))
    tracks2d = np.zeros((P, F, 2))
    track_depth = np.zeros((P, F))
    visible = np.zeros((P, F), dtype=bool)
    for i in range(F):
        t = script.frame_time(i)
        pts = _point_positions(scene, owner, local, t)
        uv, z = project_points(pts, script.camera.pose(t), cam)
        tracks3d[:, i] = pts
        tracks2d[:, i] = uv
        track_depth[:, i] = z
        visible[:, i] = np.isfinite(z) & (z > NEAR_PLANE) & (uv[:, 0] > -0.5) & (uv[:, 0] < cam.width - 0.5) & (
            uv[:, 1] > -0.5) & (uv[:, 1] < cam.height - 0.5)
    with open(out / "tracks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "frame", "u", "v", "visible"])
        for p in range(P):
            for i in range(F):
                w.writerow([p, i, repr(float(tracks2d[p, i, 0])), repr(float(tracks2d[p, i, 1])), int(visible[p, i])])
    np.save(out / "tracks3d.npy", tracks3d)
    np.save(out / "track_depth.npy", track_depth)
    np.save(out / "track_owner.npy", owner)

    manifest = {
        "format": "deblur-splat-dataset",
        "version": 1,
        "camera": cam.to_dict(),
        "background_color": list(map(float, bg)),
        "num_frames": F,
        "canonical_frame": canonical,
        "sub_samples": m,
        "track_stride": script.track_stride,
        "tracks": "tracks.csv",
        "tracks3d": "tracks3d.npy",
        "track_depth": "track_depth.npy",
        "track_owner": "track_owner.npy",
        "frames": frames,
        "script": script.to_dict(),
    }
    manifest = perturb_poses(manifest, script.pose_noise_deg, script.pose_noise_translation, script.noise_seed)
    write_json(out / "manifest.json", manifest)
    return manifest


def read_tracks_csv(path, num_frames: int):
    """Returns ``(tracks2d (P, F, 2), visible (P, F))``."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["point_id"]), int(r["frame"]), float(r["u"]), float(r["v"]), int(r["visible"])))
    P = max((r[0] for r in rows), default=-1) + 1
    tracks = np.zeros((P, num_frames, 2))
    visible = np.zeros((P, num_frames), dtype=bool)
    for p, f, u, v, vis in rows:
        tracks[p, f] = (u, v)
        visible[p, f] = bool(vis)
    return tracks, visible


def tangent_error(a: Pose, b: Pose) -> np.ndarray:
    """Right-tangent 6-vector taking ``a`` to ``b``."""
    rel = a.inverse().compose(b)
    return np.concatenate([so3_log(rel.rotation), rel.translation])
