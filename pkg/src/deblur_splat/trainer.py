"""
Two-stage optimization.

Stage 1 reconstructs the static scene and each frame's exposure
trajectory (two right-deltas on the initial pose) from the masked blurry
images. Stage 2 adds dynamic Gaussians seeded from the canonical frame's
mask, the static and dynamic deformation fields, and fits full images.
During the track warmup window dynamic means are additionally pulled
toward backprojected 2D tracks and dynamic densification is suspended so
the Gaussian-to-track correspondence stays fixed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .blur import CameraTrajectory, ExposureWindow, VirtualSampleSet, blur_loss_and_grad
from .config import TrainConfig
from .dataset import Dataset
from .deformation import (
    DeformationField,
    deform_gaussians,
    deform_gaussians_grid,
    deform_gaussians_grid_vjp,
    deform_gaussians_vjp,
)
from .errors import DataError, NumericError, StateError
from .io import read_container, write_container
from .lie import Pose, quat_to_matrix, so3_log
from .losses import TrackSet, backproject_tracks, full_l1, masked_l1, ssim_loss, track_loss
from .metrics import laplacian_variance, psnr, shift_invariant, ssim
from .raster import render
from .scene import DYNAMIC, PARAM_NAMES, STATIC, Gaussians, GaussianGrads, logit

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deblur-splat-checkpoint"
SPLIT_DIVISOR = 1.6
ROLES = ("static", "dynamic")


class AdamState:
    """Adam with per-row step counts so sparse row updates (one frame's pose) stay unbiased."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.slots = {}

    def _slot(self, name, param):
        slot = self.slots.get(name)
        if slot is None or slot["m"].shape != param.shape:
            slot = {"m": np.zeros_like(param), "v": np.zeros_like(param), "t": np.zeros(param.shape[0], dtype=np.int64)}
            self.slots[name] = slot
        return slot

    def step(self, name, param, grad, lr, rows=None):
        """In-place update of ``param`` (all rows, or only ``rows``)."""
        slot = self._slot(name, param)
        sel = slice(None) if rows is None else np.asarray(rows)
        slot["t"][sel] += 1
        t = slot["t"][sel].reshape((-1,) + (1,) * (param.ndim - 1))
        m = slot["m"][sel] = self.beta1 * slot["m"][sel] + (1 - self.beta1) * grad[sel]
        v = slot["v"][sel] = self.beta2 * slot["v"][sel] + (1 - self.beta2) * grad[sel] ** 2
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param[sel] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reindex(self, name, index):
        """Rows follow ``index``; ``-1`` entries start from fresh state."""
        slot = self.slots.get(name)
        if slot is None:
            return
        keep = index >= 0
        src = np.maximum(index, 0)
        for k in ("m", "v", "t"):
            arr = slot[k][src]
            arr[~keep] = 0
            slot[k] = arr

    def to_arrays(self) -> dict:
        out = {}
        for name in sorted(self.slots):
            for k in ("m", "v", "t"):
                out[f"opt/{name}/{k}"] = self.slots[name][k]
        return out

    def load_arrays(self, arrays: dict):
        self.slots = {}
        for key, arr in arrays.items():
            if not key.startswith("opt/"):
                continue
            _, name, k = key.split("/")
            self.slots.setdefault(name, {})[k] = arr.copy()


def frame_order(seed: int, epoch: int, num_frames: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(num_frames)


def frame_for_iteration(seed: int, it: int, num_frames: int) -> int:
    return int(frame_order(seed, it // num_frames, num_frames)[it % num_frames])


def _pixel_rays(cam, xs, ys, z):
    return np.stack([(xs - cam.cx) / cam.fx * z, (ys - cam.cy) / cam.fy * z, z], axis=-1)


def init_static_gaussians(data: Dataset, cfg: TrainConfig) -> Gaussians:
    """Backproject strided, unmasked depth pixels of every frame with the
    initial poses, then keep one point per voxel (first in frame order)."""
    ic = cfg.init
    cam = data.camera
    pts, cols, zs = [], [], []
    for fr in data.frames:
        ys, xs = np.mgrid[0 : cam.height : ic.static_stride, 0 : cam.width : ic.static_stride]
        ys, xs = ys.ravel(), xs.ravel()
        z = fr.depth[ys, xs]
        ok = ~fr.mask[ys, xs] & np.isfinite(z) & (z > 0)
        xs, ys, z = xs[ok], ys[ok], z[ok]
        pts.append(fr.initial_pose.transform(_pixel_rays(cam, xs, ys, z)))
        cols.append(fr.image[ys, xs])
        zs.append(z)
    if not pts or sum(len(p) for p in pts) == 0:
        raise DataError("no static pixels with finite depth to initialize from")
    pts, cols, zs = np.concatenate(pts), np.concatenate(cols), np.concatenate(zs)
    footprint = np.median(zs) / cam.fx * ic.static_stride
    keys = np.floor(pts / (footprint * ic.static_voxel)).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    pts, cols, zs = pts[first], cols[first], zs[first]
    n = len(pts)
    scale = zs / cam.fx * ic.static_stride * ic.static_scale_factor
    return Gaussians(
        means=pts,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(ic.static_opacity)),
        colors=np.clip(cols, 0.0, 1.0),
        tags=np.full(n, STATIC),
    )


def init_dynamic_gaussians(data: Dataset, mid_poses, cfg: TrainConfig) -> Gaussians:
    """One dynamic Gaussian per strided mask pixel of the canonical frame,
    backprojected through the depth oracle from the optimized mid pose."""
    seeds = data.seed_pixels()
    if len(seeds) == 0:
        log.warning("dynamic mask is empty at the canonical frame; no dynamic Gaussians created")
        return Gaussians.empty()
    fr = data.frames[data.canonical_frame]
    cam = data.camera
    xs, ys = seeds[:, 0].astype(int), seeds[:, 1].astype(int)
    z = fr.depth[ys, xs]
    if not np.all(np.isfinite(z)):
        raise DataError("depth oracle has no value under some dynamic seed pixels")
    pts = mid_poses[data.canonical_frame].transform(_pixel_rays(cam, seeds[:, 0], seeds[:, 1], z))
    n = len(pts)
    scale = z / cam.fx * data.track_stride * cfg.init.dynamic_scale_factor
    return Gaussians(
        means=pts,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(cfg.init.dynamic_opacity)),
        colors=np.clip(fr.image[ys, xs], 0.0, 1.0),
        tags=np.full(n, DYNAMIC),
    )


def constant_velocity_deltas(data: Dataset) -> np.ndarray:
    """Half-exposure tangent per frame from finite differences of the initial poses.

    Returns ``(F, 6)`` vectors ``h`` such that ``(-h, +h)`` places the two
    exposure endpoints on a constant-velocity path through the initial pose.
    """
    F = len(data)
    out = np.zeros((F, 6))
    if F < 2:
        return out
    for i in range(F):
        a, b = max(i - 1, 0), min(i + 1, F - 1)
        pa, pb = data[a].initial_pose, data[b].initial_pose
        dt = data[b].time - data[a].time
        rel = pa.inverse().compose(pb)
        tangent = np.concatenate([so3_log(rel.rotation), rel.translation])
        out[i] = 0.5 * data[i].exposure * tangent / dt
    return out


def camera_extent(data: Dataset) -> float:
    """1.1 times the largest distance of an initial camera centre from their mean, floored at 1e-2."""
    centers = np.array([fr.initial_pose.translation for fr in data.frames])
    radius = np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))
    return float(1.1 * max(radius, 1e-2))


def split_children(g: Gaussians, rng) -> Gaussians:
    """Two children per Gaussian drawn from its own density, scales divided by 1.6."""
    R = quat_to_matrix(g.quats / np.linalg.norm(g.quats, axis=1, keepdims=True))
    kids = []
    for _ in range(2):
        local = rng.standard_normal((len(g), 3)) * g.scales
        kids.append(g.replace(
            means=g.means + np.einsum("nij,nj->ni", R, local),
            log_scales=g.log_scales - np.log(SPLIT_DIVISOR),
        ))
    return Gaussians.concat(kids)


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset | None = None, *, _restore=None):
        self.cfg = config
        self.data = dataset if dataset is not None else Dataset(config.dataset)
        self.cam = self.data.camera
        F = len(self.data)
        self.opt = AdamState(config.adam.beta1, config.adam.beta2, config.adam.eps)
        self.records = []
        self._log_fh = None
        if _restore is not None:
            return
        self.iteration = 0
        rng = np.random.default_rng([config.seed, 0])
        sd = config.init.delta_sigma
        self.delta_start = rng.normal(0.0, sd, (F, 6))
        self.delta_end = rng.normal(0.0, sd, (F, 6))
        if config.init.delta_mode == "neighbors":
            v = constant_velocity_deltas(self.data)
            self.delta_start -= v
            self.delta_end += v
        self.gaussians = init_static_gaussians(self.data, config)
        c = self.gaussians.means.mean(axis=0)
        self.scene_extent = float(1.1 * np.max(np.linalg.norm(self.gaussians.means - c, axis=1)))
        self.camera_extent = camera_extent(self.data)
        self.fields = {"static": None, "dynamic": None}
        self.track_refs = None
        self._reset_densify_stats()

    # ---- bookkeeping -------------------------------------------------

    def _reset_densify_stats(self):
        self.grad_accum = np.zeros(len(self.gaussians))
        self.grad_count = np.zeros(len(self.gaussians))

    @property
    def stage(self) -> int:
        return self.cfg.schedule.stage(self.iteration)

    @property
    def stage2_ready(self) -> bool:
        return self.fields["dynamic"] is not None

    def trajectory(self, i) -> CameraTrajectory:
        return CameraTrajectory(self.data[i].initial_pose, self.delta_start[i], self.delta_end[i])

    def window(self, i) -> ExposureWindow:
        fr = self.data[i]
        return ExposureWindow(fr.time, fr.exposure, self.cfg.virtual_views - 1)

    def sample_set(self, i, stage) -> VirtualSampleSet:
        ab = self.cfg.ablation
        return VirtualSampleSet.from_trajectory(
            self.trajectory(i), self.window(i),
            camera_motion=ab.camera_deblur,
            object_motion=ab.object_deblur and stage == 2,
        )

    def eval_pose(self, i) -> Pose:
        """Mid-exposure pose; the start endpoint when exposures are modelled as a single sharp pose."""
        traj = self.trajectory(i)
        if self.cfg.ablation.camera_deblur:
            return traj.mid_pose()
        return traj.endpoints()[0]

    def active_fields(self) -> dict:
        out = {"dynamic": self.fields["dynamic"]}
        if self.cfg.ablation.static_field:
            out["static"] = self.fields["static"]
        return {k: v for k, v in out.items() if v is not None}

    def lr_means(self) -> float:
        lr = self.cfg.lr
        frac = min(self.iteration / max(self.cfg.schedule.iters_total, 1), 1.0)
        return float(np.exp((1 - frac) * np.log(lr.means) + frac * np.log(lr.means_final)) * self.camera_extent)

    def lr_field(self) -> float:
        """Constant through the track warmup, then exponential decay to ``lr.field_final`` at the end."""
        lr, sch = self.cfg.lr, self.cfg.schedule
        span = max(sch.iters_total - sch.iters_track_warmup_end, 1)
        frac = min(max((self.iteration - sch.iters_track_warmup_end) / span, 0.0), 1.0)
        return float(np.exp((1 - frac) * np.log(lr.field) + frac * np.log(lr.field_final)))

    def _emit(self, record: dict):
        self.records.append(record)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_fh.flush()

    # ---- parameter updates -------------------------------------------

    def _update_gaussians(self, grads: GaussianGrads):
        lr = self.cfg.lr
        g = self.gaussians
        rates = {
            "means": self.lr_means(),
            "log_scales": lr.scale,
            "quats": lr.rotation,
            "opacity_logits": lr.opacity,
            "colors": lr.color,
        }
        for name in PARAM_NAMES:
            self.opt.step("gaussians." + name, getattr(g, name), getattr(grads, name), rates[name])
        np.clip(g.colors, 0.0, 1.0, out=g.colors)

    def _update_pose(self, i, g_start, g_end):
        lr = self.cfg.lr.pose
        if g_start is not None:
            self.opt.step("pose.start", self.delta_start, _row(g_start, i, len(self.data)), lr, rows=[i])
        if g_end is not None and self.cfg.ablation.camera_deblur:
            self.opt.step("pose.end", self.delta_end, _row(g_end, i, len(self.data)), lr, rows=[i])

    def _update_fields(self, field_grads: dict):
        rate = self.lr_field()
        for role, grads in field_grads.items():
            f = self.fields[role]
            for k in sorted(grads):
                self.opt.step(f"field.{role}.{k}", f.params[k], grads[k], rate)

    def _accumulate_densify(self, norms):
        self.grad_accum += norms
        self.grad_count += norms > 0

    # ---- steps --------------------------------------------------------

    def _loss_fn(self, frame, masked):
        cfg = self.cfg

        def fn(image):
            if masked:
                value, grad = masked_l1(image, frame.image, frame.mask)
            else:
                value, grad = full_l1(image, frame.image)
            if cfg.ssim_weight > 0:
                sv, sg = ssim_loss(image, frame.image)
                if masked:
                    sg = sg * (~frame.mask)[..., None]
                value += cfg.ssim_weight * sv
                grad = grad + cfg.ssim_weight * sg
            return value, grad

        return fn

    def stage1_step(self, i) -> dict:
        """Masked L1 on the static blur synthesis; updates static Gaussians and frame ``i``'s deltas."""
        frame = self.data[i]
        static = self.gaussians
        if np.any(static.tags == DYNAMIC):
            raise StateError("stage 1 step with dynamic Gaussians present")
        ss = self.sample_set(i, stage=1)
        _, value, bg = blur_loss_and_grad(
            ss, static, {}, self.cam, self._loss_fn(frame, masked=True), self.data.background, self.cfg.t_min
        )
        self._check_finite(value, bg)
        self._update_gaussians(bg.gaussians)
        self._update_pose(i, bg.delta_start, bg.delta_end)
        self._accumulate_densify(bg.means2d_norm)
        return {"loss": value, "l1": value}

    def stage2_step(self, i) -> dict:
        """Full-image L1 on the dynamic blur synthesis, plus the track term during warmup."""
        cfg = self.cfg
        frame = self.data[i]
        g = self.gaussians
        fields = self.active_fields()
        ss = self.sample_set(i, stage=2)
        _, l1, bg = blur_loss_and_grad(
            ss, g, fields, self.cam, self._loss_fn(frame, masked=False), self.data.background, cfg.t_min
        )
        grads, field_grads = bg.gaussians, dict(bg.fields)
        out = {"l1": l1}
        value = l1
        lam = self.lambda_track()
        if lam > 0:
            tl, t_grads, t_field = self._track_term(i, lam)
            value += lam * tl
            out["track"] = tl
            dyn = np.flatnonzero(g.is_dynamic)
            for k in PARAM_NAMES:
                getattr(grads, k)[dyn] += getattr(t_grads, k)
            for k, v in t_field.items():
                field_grads["dynamic"][k] = field_grads["dynamic"][k] + v
        out["loss"] = value
        self._check_finite(value, bg)
        self._update_gaussians(grads)
        self._update_fields(field_grads)
        if cfg.optimize_poses_stage2:
            self._update_pose(i, bg.delta_start, bg.delta_end)
        self._accumulate_densify(bg.means2d_norm)
        return out

    def lambda_track(self) -> float:
        cfg = self.cfg
        if not cfg.ablation.track_loss or not cfg.schedule.in_warmup(self.iteration):
            return 0.0
        return cfg.lambda_track

    def _track_term(self, i, lam):
        g = self.gaussians
        dyn = g.subset(g.is_dynamic)
        if self.track_refs is None:
            raise StateError("track loss requested but no track references were built")
        field = {"dynamic": self.fields["dynamic"]}
        if self.cfg.track_frames == "current":
            deformed, record = deform_gaussians(dyn, field, self.data[i].time)
            value, g_means = track_loss(deformed.means, self.track_refs, i)
            zeros = GaussianGrads.zeros(len(dyn))
            zeros.means = lam * g_means
            canonical, fgrads = deform_gaussians_vjp(dyn, field, record, zeros)
            return value, canonical, fgrads.get("dynamic", {})
        # every frame time at once, averaged over frames
        F, n = len(self.data), len(dyn)
        stacked, record = deform_gaussians_grid(dyn, field, [fr.time for fr in self.data.frames])
        g_means = np.zeros((F * n, 3))
        value = 0.0
        for j in range(F):
            v, g = track_loss(stacked.means[j * n : (j + 1) * n], self.track_refs, j)
            value += v / F
            g_means[j * n : (j + 1) * n] = g * (lam / F)
        zeros = GaussianGrads.zeros(F * n)
        zeros.means = g_means
        canonical, fgrads = deform_gaussians_grid_vjp(dyn, field, record, zeros)
        return value, canonical, fgrads.get("dynamic", {})

    def _check_finite(self, value, bg):
        if np.isfinite(value) and all(np.all(np.isfinite(v)) for v in bg.gaussians.as_dict().values()):
            return
        path = None
        if self.cfg.out_dir:
            path = Path(self.cfg.out_dir) / "nan_dump.ckpt"
            path.parent.mkdir(parents=True, exist_ok=True)
            self.save_checkpoint(path)
        raise NumericError(f"non-finite loss or gradient at iteration {self.iteration} (state dumped to {path})")

    # ---- stage transition ---------------------------------------------

    def begin_stage2(self):
        cfg = self.cfg
        F = len(self.data)
        mid = [self.eval_pose(i) for i in range(F)]
        dyn = init_dynamic_gaussians(self.data, mid, cfg)
        n_static = len(self.gaussians)
        self.gaussians = Gaussians.concat([self.gaussians, dyn])
        index = np.concatenate([np.arange(n_static), -np.ones(len(dyn), dtype=int)])
        for name in PARAM_NAMES:
            self.opt.reindex("gaussians." + name, index)
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(len(dyn))])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(len(dyn))])
        fc = cfg.field_net
        for k, role in enumerate(ROLES):
            f = DeformationField(fc.depth, fc.width, fc.pos_freqs, fc.time_freqs, role=role)
            self.fields[role] = f.initialize(np.random.default_rng([cfg.seed, 1 + k]))
        depth = np.stack([fr.depth for fr in self.data.frames])
        self.track_refs = backproject_tracks(
            self.data.tracks2d, depth, mid, self.cam, self.data.track_visible
        )
        if len(self.track_refs) != len(dyn):
            log.warning("track count %d differs from dynamic Gaussian count %d", len(self.track_refs), len(dyn))

    # ---- densification -------------------------------------------------

    def densify_and_prune(self):
        cfg = self.cfg.densify
        g = self.gaussians
        it = self.iteration
        allow = np.zeros(len(g), dtype=bool)
        if cfg.static:
            allow |= g.tags == STATIC
        if cfg.dynamic and it >= self.cfg.schedule.iters_track_warmup_end:
            allow |= g.tags == DYNAMIC
        avg = self.grad_accum / np.maximum(self.grad_count, 1)
        high = allow & (avg >= cfg.grad_threshold)
        budget = max(cfg.max_gaussians - len(g), 0)
        if high.sum() > budget:
            ranked = np.flatnonzero(high)[np.argsort(-avg[high], kind="stable")]
            high[:] = False
            high[ranked[:budget]] = True
        big = g.scales.max(axis=1) > cfg.percent_dense * self.scene_extent
        clone = high & ~big
        split = high & big
        prune = allow & (g.opacities < cfg.opacity_floor)
        keep = ~(prune | split)
        rng = np.random.default_rng([self.cfg.seed, 7, it])
        parts = [g.subset(keep), g.subset(clone), split_children(g.subset(split), rng)]
        new = Gaussians.concat(parts)
        index = np.concatenate([np.flatnonzero(keep), -np.ones(len(new) - keep.sum(), dtype=int)])
        for name in PARAM_NAMES:
            self.opt.reindex("gaussians." + name, index)
        self.gaussians = new
        self._reset_densify_stats()
        if len(new) < cfg.min_count:
            log.warning("only %d Gaussians left after pruning", len(new))
        return {"cloned": int(clone.sum()), "split": int(split.sum()), "pruned": int(prune.sum())}

    def _densify_due(self) -> bool:
        cfg = self.cfg.densify
        it = self.iteration
        return (
            cfg.enabled
            and it >= cfg.start
            and it % cfg.interval == 0
            and it < cfg.stop_fraction * self.cfg.schedule.iters_total
        )

    # ---- main loop ----------------------------------------------------

    def step(self) -> dict:
        sch = self.cfg.schedule
        it = self.iteration
        if it >= sch.iters_stage1 and not self.stage2_ready:
            self.begin_stage2()
            self._emit({"event": "stage_transition", "iter": it, "from": "stage1", "to": "stage2_warmup",
                        "n_dynamic": int(self.gaussians.is_dynamic.sum())})
        if it == sch.iters_track_warmup_end:
            self._emit({"event": "stage_transition", "iter": it, "from": "stage2_warmup", "to": "stage2"})
        i = frame_for_iteration(self.cfg.seed, it, len(self.data))
        out = self.stage1_step(i) if it < sch.iters_stage1 else self.stage2_step(i)
        self.iteration += 1
        if self._densify_due():
            out["densify"] = self.densify_and_prune()
        rec = {
            "iter": it,
            "stage": 1 if it < sch.iters_stage1 else 2,
            "frame": i,
            "n_static": int((self.gaussians.tags == STATIC).sum()),
            "n_dynamic": int(self.gaussians.is_dynamic.sum()),
            **out,
        }
        if it % max(self.cfg.log_every, 1) == 0 or "densify" in out:
            err = self.track_error()
            if err is not None:
                rec["track_error"] = err
            self._emit(rec)
        return rec

    def train(self, until=None, log_path=None, checkpoint_dir=None):
        total = self.cfg.schedule.iters_total if until is None else min(until, self.cfg.schedule.iters_total)
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(log_path, "a")
        try:
            while self.iteration < total:
                self.step()
                K = self.cfg.checkpoint_every
                if checkpoint_dir is not None and K > 0 and self.iteration % K == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"iter_{self.iteration:06d}.ckpt")
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return self

    # ---- evaluation ----------------------------------------------------

    def scene_at(self, t) -> Gaussians:
        fields = self.active_fields()
        if not fields:
            return self.gaussians
        deformed, _ = deform_gaussians(self.gaussians, fields, t)
        return deformed

    def render_frame(self, i, pose=None):
        fr = self.data[i]
        pose = self.eval_pose(i) if pose is None else pose
        return render(self.scene_at(fr.time), pose, self.cam, self.data.background, self.cfg.t_min)

    def track_error(self):
        """Mean distance between dynamic Gaussians at frame times and ground-truth 3D tracks."""
        gt = self.data.tracks3d
        g = self.gaussians
        n_dyn = int(g.is_dynamic.sum())
        if gt is None or n_dyn == 0 or n_dyn != gt.shape[0]:
            return None
        dyn = g.subset(g.is_dynamic)
        field = {"dynamic": self.fields["dynamic"]}
        errs = []
        for i, fr in enumerate(self.data.frames):
            moved, _ = deform_gaussians(dyn, field, fr.time)
            ok = np.all(np.isfinite(gt[:, i]), axis=1)
            errs.append(np.linalg.norm(moved.means[ok] - gt[ok, i], axis=1))
        errs = np.concatenate(errs)
        return float(errs.mean()) if len(errs) else None

    def evaluate(self, frames=None) -> dict:
        """Sharp renders at each frame's mid pose and time against held-out ground truth."""
        frames = range(len(self.data)) if frames is None else frames
        shift = self.cfg.eval_max_shift
        rows = []
        for i in frames:
            fr = self.data[i]
            if fr.sharp is None:
                raise DataError(f"frame {i} has no sharp ground truth to evaluate against")
            img = self.render_frame(i)
            rows.append({
                "frame": int(i),
                "psnr": psnr(img, fr.sharp),
                "ssim": ssim(img, fr.sharp),
                "lv": laplacian_variance(img),
                "si_psnr": shift_invariant(psnr, img, fr.sharp, shift),
                "si_ssim": shift_invariant(ssim, img, fr.sharp, shift),
                "psnr_dynamic": psnr(img, fr.sharp, fr.mask) if fr.mask.any() else float("nan"),
            })
        return {"rows": rows, "aggregate": aggregate_rows(rows)}

    # ---- checkpoints ---------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {f"gaussians/{k}": v for k, v in self.gaussians.params().items()}
        arrays["gaussians/tags"] = self.gaussians.tags
        arrays["pose/delta_start"] = self.delta_start
        arrays["pose/delta_end"] = self.delta_end
        arrays["densify/grad_accum"] = self.grad_accum
        arrays["densify/grad_count"] = self.grad_count
        for role, f in self.fields.items():
            if f is not None:
                for k in sorted(f.params):
                    arrays[f"field/{role}/{k}"] = f.params[k]
        if self.track_refs is not None:
            arrays["tracks/positions"] = self.track_refs.positions
            arrays["tracks/valid"] = self.track_refs.valid
        arrays.update(self.opt.to_arrays())
        return arrays

    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "iteration": self.iteration,
            "scene_extent": self.scene_extent,
            "camera_extent": self.camera_extent,
            "camera": self.cam.to_dict(),
            "background": [float(x) for x in self.data.background],
            "config": self.cfg.to_dict(),
        }
        write_container(path, self.state_arrays(), meta)
        return path

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset | None = None, config: TrainConfig | None = None):
        arrays, meta = read_container(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a training checkpoint")
        cfg = config if config is not None else TrainConfig.from_dict(meta["config"])
        self = cls(cfg, dataset, _restore=True)
        self.iteration = int(meta["iteration"])
        self.scene_extent = float(meta["scene_extent"])
        self.camera_extent = float(meta["camera_extent"])
        self.gaussians = Gaussians(
            **{k: arrays[f"gaussians/{k}"] for k in PARAM_NAMES}, tags=arrays["gaussians/tags"]
        )
        self.delta_start = arrays["pose/delta_start"].copy()
        self.delta_end = arrays["pose/delta_end"].copy()
        self.grad_accum = arrays["densify/grad_accum"].copy()
        self.grad_count = arrays["densify/grad_count"].copy()
        fc = cfg.field_net
        self.fields = {}
        for role in ROLES:
            keys = [k for k in arrays if k.startswith(f"field/{role}/")]
            if not keys:
                self.fields[role] = None
                continue
            f = DeformationField(fc.depth, fc.width, fc.pos_freqs, fc.time_freqs, role=role)
            f.params = {k.split("/")[-1]: arrays[k].copy() for k in keys}
            self.fields[role] = f
        self.track_refs = None
        if "tracks/positions" in arrays:
            self.track_refs = TrackSet(arrays["tracks/positions"], arrays["tracks/valid"])
        self.opt.load_arrays(arrays)
        return self


def _row(g, i, F):
    full = np.zeros((F, 6))
    full[i] = g
    return full


def aggregate_rows(rows) -> dict:
    keys = [k for k in rows[0] if k != "frame"] if rows else []
    agg = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=float)
        agg[k] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
    return agg


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
