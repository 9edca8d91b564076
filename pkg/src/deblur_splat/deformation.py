"""
Time-conditioned deformation fields.

A field is a ReLU MLP on sinusoidally encoded canonical means and time that
emits 10 numbers per Gaussian: a mean offset (3), a quaternion increment
(4) and a log-scale offset (3). The output layer starts at zero, so a fresh
field leaves every Gaussian where it is. Reverse mode is written out by
hand for this fixed topology.
"""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .lie import quat_multiply
from .scene import DYNAMIC, STATIC, Gaussians, GaussianGrads, normalize_vjp

OUTPUT_DIM = 10
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def encode(v, n_freqs: int):
    """``[v, sin(2^l pi v), cos(2^l pi v)]`` for ``l < n_freqs``, last axis."""
    v = np.asarray(v, dtype=float)
    parts = [v]
    for level in range(n_freqs):
        arg = (2.0**level * np.pi) * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encode_vjp(v, n_freqs: int, g_enc):
    """Gradient w.r.t. ``v`` given the gradient of :func:`encode`'s output."""
    v = np.asarray(v, dtype=float)
    k = v.shape[-1]
    g = g_enc[..., :k].copy()
    for level in range(n_freqs):
        f = 2.0**level * np.pi
        base = k * (1 + 2 * level)
        g += g_enc[..., base : base + k] * f * np.cos(f * v)
        g -= g_enc[..., base + k : base + 2 * k] * f * np.sin(f * v)
    return g


class DeformationField:
    """MLP ``(encode(x), encode(t)) -> (dx, dr, ds)``.

    ``depth`` counts hidden layers. Parameters live in ``self.params`` as
    ``w0, b0, w1, b1, ...`` so an optimizer can update them in place.
    """

    def __init__(self, depth=4, width=64, pos_freqs=10, time_freqs=6, role="dynamic"):
        if role not in ("dynamic", "static"):
            raise ValueError(f"unknown field role {role!r}")
        self.depth = depth
        self.width = width
        self.pos_freqs = pos_freqs
        self.time_freqs = time_freqs
        self.role = role
        self.params: dict | None = None
        self._record = None

    @property
    def input_dim(self):
        return 3 * (2 * self.pos_freqs + 1) + (2 * self.time_freqs + 1)

    @property
    def layer_shapes(self):
        dims = [self.input_dim] + [self.width] * self.depth + [OUTPUT_DIM]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def tag(self):
        return DYNAMIC if self.role == "dynamic" else STATIC

    def initialize(self, rng: np.random.Generator) -> "DeformationField":
        params = {}
        shapes = self.layer_shapes
        for i, (fan_in, fan_out) in enumerate(shapes):
            if i == len(shapes) - 1:
                params[f"w{i}"] = np.zeros((fan_in, fan_out))
            else:
                params[f"w{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        self.params = params
        return self

    def _require(self):
        if self.params is None:
            raise StateError("deformation field used before initialize()")

    def forward(self, means, times):
        """Raw 10-vector outputs for each row; returns ``(out, record)``."""
        self._require()
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        times = np.broadcast_to(np.asarray(times, dtype=float), (len(means),)).reshape(-1, 1)
        h = np.concatenate([encode(means, self.pos_freqs), encode(times, self.time_freqs)], axis=1)
        acts = [h]
        n_layers = len(self.layer_shapes)
        for i in range(n_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        return h, {"means": means, "times": times, "acts": acts, "grid": None}

    def forward_grid(self, means, times):
        """Outputs for every ``(time, mean)`` pair, time-major: row ``j * N + k``
        pairs ``times[j]`` with ``means[k]``.

        Same values as :meth:`forward` on the expanded rows, but the position
        encoding and its first-layer product are computed once per mean.
        """
        self._require()
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        times = np.asarray(times, dtype=float).reshape(-1, 1)
        N, M = len(means), len(times)
        n_pos = 3 * (2 * self.pos_freqs + 1)
        enc_pos = encode(means, self.pos_freqs)
        enc_time = encode(times, self.time_freqs)
        w0 = self.params["w0"]
        z = (enc_time @ w0[n_pos:] + self.params["b0"])[:, None, :] + (enc_pos @ w0[:n_pos])[None, :, :]
        n_layers = len(self.layer_shapes)
        h = z.reshape(M * N, -1)
        if n_layers > 1:
            h = np.maximum(h, 0.0)
        acts = [None, h]
        for i in range(1, n_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        return h, {"means": means, "times": times, "acts": acts, "grid": (M, N, enc_pos, enc_time)}

    def backward(self, record, g_out):
        """Exact reverse mode of ``forward``; returns ``(param_grads, g_means)``.

        For a :meth:`forward_grid` record ``g_means`` has one row per mean,
        summed over the times.
        """
        if record is None:
            raise StateError("backward called without a recorded forward pass")
        acts = record["acts"]
        grid = record["grid"]
        n_layers = len(self.layer_shapes)
        n_pos = 3 * (2 * self.pos_freqs + 1)
        grads = {}
        g = np.asarray(g_out, dtype=float)
        last = 0 if grid is None else 1
        for i in range(n_layers - 1, last - 1, -1):
            if i < n_layers - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"w{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"w{i}"].T
        if grid is None:
            g_means = encode_vjp(record["means"], self.pos_freqs, g[:, :n_pos])
            return grads, g_means
        M, N, enc_pos, enc_time = grid
        if n_layers > 1:
            g = g * (acts[1] > 0.0)
        g = g.reshape(M, N, -1)
        g_pos = g.sum(axis=0)
        g_time = g.sum(axis=1)
        w0 = self.params["w0"]
        grads["w0"] = np.concatenate([enc_pos.T @ g_pos, enc_time.T @ g_time], axis=0)
        grads["b0"] = g_time.sum(axis=0)
        g_means = encode_vjp(record["means"], self.pos_freqs, g_pos @ w0[:n_pos].T)
        return grads, g_means

    def deform(self, means, t):
        """Per-Gaussian ``(dx, dr, ds)`` at time(s) ``t``; records the pass."""
        out, self._record = self.forward(means, t)
        return out[:, 0:3], out[:, 3:7], out[:, 7:10]

    def deform_backward(self, g_dx, g_dr, g_ds):
        """Backward of the last :meth:`deform` call."""
        if self._record is None:
            raise StateError("deform_backward called without a recorded deform()")
        g_out = np.concatenate([g_dx, g_dr, g_ds], axis=1)
        return self.backward(self._record, g_out)

    def copy(self) -> "DeformationField":
        other = DeformationField(self.depth, self.width, self.pos_freqs, self.time_freqs, self.role)
        if self.params is not None:
            other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def apply_offsets(g: Gaussians, dx, dr, ds) -> Gaussians:
    """Deformed Gaussians: shifted means, composed rotations, shifted log-scales."""
    q_inc = IDENTITY_QUAT + dr
    q_inc = q_inc / np.linalg.norm(q_inc, axis=1, keepdims=True)
    return g.replace(
        means=g.means + dx,
        quats=quat_multiply(q_inc, g.quats),
        log_scales=g.log_scales + ds,
    )


def _left_mult_matrix(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=1),
            np.stack([x, w, -z, y], axis=1),
            np.stack([y, z, w, -x], axis=1),
            np.stack([z, -y, x, w], axis=1),
        ],
        axis=1,
    )


def _right_mult_matrix(r):
    w, x, y, z = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=1),
            np.stack([x, w, z, -y], axis=1),
            np.stack([y, -z, w, x], axis=1),
            np.stack([z, y, -x, w], axis=1),
        ],
        axis=1,
    )


def apply_offsets_vjp(g: Gaussians, dr, grads: GaussianGrads):
    """Split gradients of deformed Gaussians into canonical and offset parts.

    Returns ``(canonical_grads, g_dx, g_dr, g_ds)``.
    """
    raw = IDENTITY_QUAT + dr
    q_inc = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    g_quat = grads.quats
    g_canon_quat = np.einsum("nji,nj->ni", _left_mult_matrix(q_inc), g_quat)
    g_inc = np.einsum("nji,nj->ni", _right_mult_matrix(g.quats), g_quat)
    g_dr = normalize_vjp(raw, g_inc)
    canonical = GaussianGrads(
        means=grads.means.copy(),
        log_scales=grads.log_scales.copy(),
        quats=g_canon_quat,
        opacity_logits=grads.opacity_logits.copy(),
        colors=grads.colors.copy(),
    )
    return canonical, grads.means, g_dr, grads.log_scales


def deform_gaussians(g: Gaussians, fields: dict, t):
    """Apply each tag's field (if any) at time ``t`` (scalar or one per row).

    ``fields`` maps ``"static"``/``"dynamic"`` to a :class:`DeformationField`
    or ``None``. Returns the deformed Gaussians and a record for
    :func:`deform_gaussians_vjp`.
    """
    dx = np.zeros((len(g), 3))
    dr = np.zeros((len(g), 4))
    ds = np.zeros((len(g), 3))
    records = {}
    t_rows = np.broadcast_to(np.asarray(t, dtype=float), (len(g),))
    for role, f in fields.items():
        if f is None:
            continue
        idx = np.flatnonzero(g.tags == f.tag)
        if len(idx) == 0:
            continue
        out, rec = f.forward(g.means[idx], t_rows[idx])
        dx[idx], dr[idx], ds[idx] = out[:, 0:3], out[:, 3:7], out[:, 7:10]
        records[role] = (idx, rec)
    return apply_offsets(g, dx, dr, ds), {"dr": dr, "records": records}


def deform_gaussians_grid(g: Gaussians, fields: dict, times):
    """``g`` deformed to each of ``times``, stacked time-major (``len(times) * len(g)`` rows).

    Returns the stacked deformed Gaussians and a record for
    :func:`deform_gaussians_grid_vjp`.
    """
    times = np.asarray(times, dtype=float).ravel()
    M, n = len(times), len(g)
    stacked = Gaussians.concat([g] * M)
    dx = np.zeros((M * n, 3))
    dr = np.zeros((M * n, 4))
    ds = np.zeros((M * n, 3))
    records = {}
    for role, f in fields.items():
        if f is None:
            continue
        idx = np.flatnonzero(g.tags == f.tag)
        if len(idx) == 0:
            continue
        out, rec = f.forward_grid(g.means[idx], times)
        rows = (np.arange(M)[:, None] * n + idx[None, :]).ravel()
        dx[rows], dr[rows], ds[rows] = out[:, 0:3], out[:, 3:7], out[:, 7:10]
        records[role] = (idx, rows, rec)
    return apply_offsets(stacked, dx, dr, ds), {"stacked": stacked, "dr": dr, "records": records, "M": M}


def deform_gaussians_grid_vjp(g: Gaussians, fields: dict, record, grads: GaussianGrads):
    """Backward of :func:`deform_gaussians_grid`: gradients of the stacked
    deformed Gaussians to canonical grads (summed over times) and field grads."""
    M, n = record["M"], len(g)
    canonical, g_dx, g_dr, g_ds = apply_offsets_vjp(record["stacked"], record["dr"], grads)
    total = GaussianGrads(**{k: v.reshape((M, n) + v.shape[1:]).sum(axis=0) for k, v in canonical.as_dict().items()})
    field_grads = {}
    for role, (idx, rows, rec) in record["records"].items():
        g_out = np.concatenate([g_dx[rows], g_dr[rows], g_ds[rows]], axis=1)
        pg, g_means = fields[role].backward(rec, g_out)
        total.means[idx] += g_means
        field_grads[role] = pg
    return total, field_grads


def deform_gaussians_vjp(g: Gaussians, fields: dict, record, grads: GaussianGrads):
    """Backward of :func:`deform_gaussians`: canonical grads and per-field param grads."""
    canonical, g_dx, g_dr, g_ds = apply_offsets_vjp(g, record["dr"], grads)
    field_grads = {}
    for role, (idx, rec) in record["records"].items():
        f = fields[role]
        g_out = np.concatenate([g_dx[idx], g_dr[idx], g_ds[idx]], axis=1)
        pg, g_means = f.backward(rec, g_out)
        canonical.means[idx] += g_means
        field_grads[role] = pg
    return canonical, field_grads
