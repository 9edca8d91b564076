"""
Rotation and rigid-pose algebra on unit quaternions.

Quaternions are stored as ``(w, x, y, z)`` arrays and kept on the ``w >= 0``
half of the double cover. Poses are camera-to-world transforms: a point
``p_cam`` maps to ``R @ p_cam + t`` in the world.

Tangent-space conventions
-------------------------
A pose perturbation is the 6-vector ``(dw, du)`` applied on the right,

    P * (Exp(dw), du) = (R Exp(dw), t + R du),

which is also how learnable exposure deltas act on an initial pose. Every
pose gradient in this package is expressed in that right-tangent frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SMALL_ANGLE = 1e-8

__all__ = [
    "Pose",
    "skew",
    "vee",
    "quat_normalize",
    "quat_canonical",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "matrix_to_quat",
    "so3_exp",
    "so3_log",
    "right_jacobian",
    "right_jacobian_inv",
    "rotation_angle",
    "interpolate_rotation",
    "interpolate_pose_sequence",
    "apply_delta",
    "midpoint_pose",
    "delta_from_tangent",
    "pose_sequence_vjp",
    "delta_vjp",
]


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(m):
    """Inverse of :func:`skew` (reads the lower/upper off-diagonal entries)."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Normalize and pick the representative with ``w >= 0``.

    For ``w == 0`` (a half-turn) the sign is chosen so that the first nonzero
    of ``(x, y, z)`` is positive, which makes ``so3_log`` deterministic.
    """
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_multiply(a, b):
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    """Rotation matrix of a (normalized) quaternion; batched over leading axes."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(m):
    """Shepperd's method; returns the canonical quaternion."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canonical(q)


def so3_exp(omega):
    """Axis-angle vector (radians) to canonical unit quaternion."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise ValueError(f"so3_exp: non-finite input {omega}")
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        w = 1.0 - theta * theta / 8.0
        v = (0.5 - theta * theta / 48.0) * omega
    else:
        w = math.cos(0.5 * theta)
        v = math.sin(0.5 * theta) / theta * omega
    return quat_canonical(np.concatenate([[w], v]))


def so3_log(q):
    """Minimal axis-angle vector of a rotation, ``|result| <= pi``."""
    q = quat_canonical(q)
    w, v = q[0], q[1:]
    s = float(np.linalg.norm(v))
    if s < SMALL_ANGLE:
        # theta/s ~ 2/w (1 - s^2 / (3 w^2))
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    theta = 2.0 * math.atan2(s, w)
    return v * (theta / s)


def rotation_angle(q):
    return float(np.linalg.norm(so3_log(q)))


def right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * K @ K
    )


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform stored as (quaternion, translation)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_canonical(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(a[:4], a[4:7])

    def to_array(self) -> np.ndarray:
        """``(qw, qx, qy, qz, tx, ty, tz)`` as float64."""
        return np.concatenate([self.rotation, self.translation])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        return Pose(qi, -(quat_to_matrix(qi) @ self.translation))

    def transform(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def world_to_view(self):
        """``(W, tv)`` such that ``x_view = W @ x_world + tv``."""
        W = self.R.T
        return W, -W @ self.translation

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def _check_fraction(fraction):
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"interpolation fraction must lie in [0, 1], got {fraction}")


def interpolate_rotation(r_start, r_end, fraction: float):
    """Geodesic ``r_start * Exp(f * Log(r_start^-1 * r_end))``."""
    _check_fraction(fraction)
    r_start = quat_canonical(r_start)
    r_end = quat_canonical(r_end)
    if fraction == 0.0:
        return r_start
    if fraction == 1.0:
        return r_end
    rel = quat_multiply(quat_conjugate(r_start), r_end)
    return quat_canonical(quat_multiply(r_start, so3_exp(fraction * so3_log(rel))))


def interpolate_pose_sequence(p_start: Pose, p_end: Pose, n: int) -> list[Pose]:
    """``n + 1`` poses: rotations on the geodesic, translations affine in ``j / n``."""
    if n < 1:
        raise ValueError(f"pose sequence needs n >= 1, got {n}")
    rel = so3_log(quat_multiply(quat_conjugate(p_start.rotation), p_end.rotation))
    poses = [p_start]
    for j in range(1, n):
        s = j / n
        q = quat_multiply(p_start.rotation, so3_exp(s * rel))
        t = p_start.translation + s * (p_end.translation - p_start.translation)
        poses.append(Pose(q, t))
    poses.append(p_end)
    return poses


def apply_delta(initial: Pose, delta: Pose) -> Pose:
    """Right-compose a learnable delta: ``initial * delta``."""
    return initial.compose(delta)


def midpoint_pose(p_start: Pose, p_end: Pose) -> Pose:
    q = interpolate_rotation(p_start.rotation, p_end.rotation, 0.5)
    return Pose(q, 0.5 * (p_start.translation + p_end.translation))


def delta_from_tangent(xi) -> Pose:
    """Map a 6-vector ``(omega, u)`` to the delta pose ``(Exp(omega), u)``."""
    xi = np.asarray(xi, dtype=float)
    return Pose(so3_exp(xi[:3]), xi[3:6])


def pose_sequence_vjp(p_start: Pose, p_end: Pose, fractions: Sequence[float], grads):
    """Pull right-tangent gradients of interpolated poses back to the endpoints.

    ``grads[j]`` is the 6-vector gradient of the pose at ``fractions[j]``.
    Returns ``(g_start, g_end)`` in the endpoints' right-tangent frames.
    """
    grads = np.asarray(grads, dtype=float).reshape(len(fractions), 6)
    R0, Rn = p_start.R, p_end.R
    phi = so3_log(quat_multiply(quat_conjugate(p_start.rotation), p_end.rotation))
    jl_inv = right_jacobian_inv(-phi)
    jr_inv = right_jacobian_inv(phi)
    g_rot0 = np.zeros(3)
    g_rotn = np.zeros(3)
    g_t0 = np.zeros(3)
    g_tn = np.zeros(3)
    for s, g in zip(fractions, grads):
        exp_s = quat_to_matrix(so3_exp(s * phi))
        jr_s = right_jacobian(s * phi)
        # perturbing R0 moves R_j by (Exp(s phi)^T - s Jr(s phi) Jl^-1(phi)) a
        a_map = exp_s.T - s * jr_s @ jl_inv
        b_map = s * jr_s @ jr_inv
        g_rot0 += a_map.T @ g[:3]
        g_rotn += b_map.T @ g[:3]
        Rj = R0 @ exp_s
        g_world = Rj @ g[3:]
        g_t0 += (1.0 - s) * g_world
        g_tn += s * g_world
    return (
        np.concatenate([g_rot0, R0.T @ g_t0]),
        np.concatenate([g_rotn, Rn.T @ g_tn]),
    )


def delta_vjp(initial: Pose, xi, grad):
    """Gradient w.r.t. ``xi`` of ``apply_delta(initial, delta_from_tangent(xi))``.

    ``grad`` is the right-tangent gradient of the composed pose.
    """
    xi = np.asarray(xi, dtype=float)
    grad = np.asarray(grad, dtype=float)
    g_omega = right_jacobian(xi[:3]).T @ grad[:3]
    # world translation t0 = t + R_init u, right-tangent trans is R0^T dt
    rot_delta = quat_to_matrix(so3_exp(xi[:3]))
    g_u = rot_delta @ grad[3:]
    return np.concatenate([g_omega, g_u])
