"""
Gaussian primitives, pinhole cameras and EWA projection to screen space.

Parameters are stored unconstrained: log-scales, opacity logits and raw
(unnormalized) quaternions. Colors are flat RGB (no view dependence).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import Pose, quat_normalize, quat_to_matrix, vee

NEAR_PLANE = 0.01
DILATION = 0.3
EIG_FLOOR = 1e-6

STATIC = 0
DYNAMIC = 1

PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "colors")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussians:
    """A set of anisotropic 3D Gaussians with static/dynamic tags."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    tags: np.ndarray = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        if self.tags is None:
            self.tags = np.zeros(n, dtype=np.int8)
        self.tags = np.asarray(self.tags, dtype=np.int8).reshape(n)

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def is_dynamic(self):
        return self.tags == DYNAMIC

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "Gaussians":
        return Gaussians(**{k: v.copy() for k, v in self.params().items()}, tags=self.tags.copy())

    def subset(self, index) -> "Gaussians":
        return Gaussians(**{k: v[index] for k, v in self.params().items()}, tags=self.tags[index])

    def replace(self, **changes) -> "Gaussians":
        kw = self.params()
        kw["tags"] = self.tags
        kw.update(changes)
        return Gaussians(**kw)

    @staticmethod
    def concat(parts) -> "Gaussians":
        parts = list(parts)
        if not parts:
            return Gaussians.empty()
        kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in PARAM_NAMES}
        return Gaussians(**kw, tags=np.concatenate([p.tags for p in parts]))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; pixel ``(i, j)`` has its center at coordinate ``(i, j)``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass
class ProjectedGaussian:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    opacity: float


def covariance_from_params(log_scale, quat):
    """``R diag(s^2) R^T``; batched when inputs have a leading axis."""
    log_scale = np.asarray(log_scale, dtype=float)
    R = quat_to_matrix(quat)
    s2 = np.exp(2.0 * log_scale)
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


@dataclass
class Projection:
    """Screen-space splats plus everything the backward pass needs."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    radii: np.ndarray
    valid: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def project_gaussians(g: Gaussians, pose: Pose, cam: Camera) -> Projection:
    """EWA projection of every Gaussian; culled entries have ``valid == False``."""
    W, tv = pose.world_to_view()
    n = len(g)
    qn = quat_normalize(g.quats) if n else np.zeros((0, 4))
    R = quat_to_matrix(qn) if n else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * g.log_scales)
    cov3d = (R * s2[:, None, :]) @ R.transpose(0, 2, 1)
    xc = g.means @ W.T + tv
    X, Y, Z = xc[:, 0], xc[:, 1], xc[:, 2]
    in_front = Z > NEAR_PLANE
    Zs = np.where(in_front, Z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / Zs
    J[:, 0, 2] = -cam.fx * X / Zs**2
    J[:, 1, 1] = cam.fy / Zs
    J[:, 1, 2] = -cam.fy * Y / Zs**2
    cov_view = W @ cov3d @ W.T
    cov2d = J @ cov_view @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    # dilation keeps eigenvalues >= 0.3, so the floor only guards degenerate input
    det = np.maximum(a * c - b * b, EIG_FLOOR**2)
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    u = cam.fx * X / Zs + cam.cx
    v = cam.fy * Y / Zs + cam.cy
    means2d = np.stack([u, v], axis=1)
    radii = 3.0 * np.sqrt(np.stack([a, c], axis=1))
    on_screen = (
        (u + radii[:, 0] >= 0)
        & (u - radii[:, 0] <= cam.width - 1)
        & (v + radii[:, 1] >= 0)
        & (v - radii[:, 1] <= cam.height - 1)
    )
    valid = in_front & on_screen
    return Projection(
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=Z,
        opacities=sigmoid(g.opacity_logits),
        colors=g.colors,
        radii=radii,
        valid=valid,
        cache=dict(W=W, tv=tv, R=R, qn=qn, s2=s2, cov3d=cov3d, cov_view=cov_view, xc=xc, J=J, Zs=Zs),
    )


def project_gaussian(g: Gaussians, pose: Pose, cam: Camera):
    """Project a single Gaussian; returns ``None`` when culled."""
    if len(g) != 1:
        raise ValueError("project_gaussian expects exactly one Gaussian")
    p = project_gaussians(g, pose, cam)
    if not p.valid[0]:
        return None
    return ProjectedGaussian(p.means2d[0], p.cov2d[0], float(p.depths[0]), float(p.opacities[0]))


def depth_sort(depths):
    """Front-to-back order; equal depths keep their input order."""
    return np.argsort(np.asarray(depths, dtype=float), kind="stable")


def _quat_matrix_vjp(q, G):
    """Gradient w.r.t. a unit quaternion of ``sum(G * R(q))``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: G[:, i, j]
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    gy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    gz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
        + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    return np.stack([gw, gx, gy, gz], axis=1)


def normalize_vjp(q, g_unit):
    """Backpropagate through ``q / |q|`` (row-wise)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    return (g_unit - qn * np.sum(qn * g_unit, axis=1, keepdims=True)) / norm


@dataclass
class GaussianGrads:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __iadd__(self, other):
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, k: float) -> "GaussianGrads":
        return GaussianGrads(**{n: v * k for n, v in self.as_dict().items()})


def projection_vjp(g: Gaussians, proj: Projection, cam: Camera, g_means2d, g_conics, g_opac, g_colors):
    """Chain screen-space gradients back to Gaussian parameters and the pose.

    ``g_conics`` holds gradients w.r.t. the conic entries ``(a, b, c)`` of
    ``[[a, b], [b, c]]``; ``g_opac`` is w.r.t. the post-sigmoid opacity.
    Returns ``(GaussianGrads, pose_grad)`` with the pose gradient as a
    right-tangent 6-vector.
    """
    c = proj.cache
    n = len(g)
    W, tv, R, qn = c["W"], c["tv"], c["R"], c["qn"]
    mask = proj.valid.astype(float)
    g_means2d = g_means2d * mask[:, None]
    g_conics = g_conics * mask[:, None]

    o = proj.opacities
    g_logit = g_opac * o * (1.0 - o)

    conic = np.empty((n, 2, 2))
    conic[:, 0, 0] = proj.conics[:, 0]
    conic[:, 0, 1] = conic[:, 1, 0] = proj.conics[:, 1]
    conic[:, 1, 1] = proj.conics[:, 2]
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = g_conics[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conics[:, 1]
    Gc[:, 1, 1] = g_conics[:, 2]
    G_cov2d = -(conic @ Gc @ conic)

    J = c["J"]
    cov_view = c["cov_view"]
    G_cov_view = J.transpose(0, 2, 1) @ G_cov2d @ J
    G_J = 2.0 * (G_cov2d @ J @ cov_view)

    xc, Zs = c["xc"], c["Zs"]
    X, Y = xc[:, 0], xc[:, 1]
    fx, fy = cam.fx, cam.fy
    gu, gv = g_means2d[:, 0], g_means2d[:, 1]
    g_xc = np.empty((n, 3))
    g_xc[:, 0] = gu * fx / Zs - G_J[:, 0, 2] * fx / Zs**2
    g_xc[:, 1] = gv * fy / Zs - G_J[:, 1, 2] * fy / Zs**2
    g_xc[:, 2] = (
        -G_J[:, 0, 0] * fx / Zs**2
        + G_J[:, 0, 2] * 2.0 * fx * X / Zs**3
        - G_J[:, 1, 1] * fy / Zs**2
        + G_J[:, 1, 2] * 2.0 * fy * Y / Zs**3
        - gu * fx * X / Zs**2
        - gv * fy * Y / Zs**2
    )

    g_means = g_xc @ W
    G_cov3d = W.T @ G_cov_view @ W
    G_W = g_xc.T @ g.means + 2.0 * (G_cov_view @ (W @ c["cov3d"])).sum(axis=0)
    g_tv = g_xc.sum(axis=0)

    s2 = c["s2"]
    GR = G_cov3d @ R
    G_R = 2.0 * GR * s2[:, None, :]
    g_log_scales = 2.0 * s2 * np.sum(R * GR, axis=1)
    g_quats = normalize_vjp(g.quats, _quat_matrix_vjp(qn, G_R)) if n else np.zeros((0, 4))

    grads = GaussianGrads(
        means=g_means,
        log_scales=g_log_scales,
        quats=g_quats,
        opacity_logits=g_logit,
        colors=g_colors,
    )
    M = G_W @ W.T
    g_rot = -vee(M - M.T) - np.cross(tv, g_tv)
    pose_grad = np.concatenate([g_rot, -g_tv])
    return grads, pose_grad

