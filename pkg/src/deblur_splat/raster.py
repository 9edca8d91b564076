"""
Differentiable front-to-back alpha compositing of projected Gaussians.

Splats are visited in depth order and scattered over the pixels of their
3-sigma screen box, so every pixel composites its overlapping splats front
to back and stops once transmittance drops below ``t_min``. The backward
kernel replays that scatter to record each splat's transmittance per box
pixel, then walks the splats in reverse depth order carrying the
composite-behind colour per pixel. Both kernels are serial, so the
reduction order (and therefore every bit of the output) is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .lie import Pose
from .scene import Camera, Gaussians, GaussianGrads, depth_sort, project_gaussians, projection_vjp

DEFAULT_BACKGROUND = (0.0, 0.0, 0.0)
DEFAULT_T_MIN = 1e-4


@dataclass
class RenderGradients:
    gaussians: GaussianGrads
    pose: np.ndarray
    means2d_norm: np.ndarray


@numba.njit(cache=True)
def _box_offsets(rects, order):
    m = order.shape[0]
    offsets = np.zeros(m + 1, dtype=np.int64)
    for k in range(m):
        g = order[k]
        offsets[k + 1] = offsets[k] + (rects[g, 1] - rects[g, 0] + 1) * (rects[g, 3] - rects[g, 2] + 1)
    return offsets


@numba.njit(cache=True)
def _forward_kernel(means2d, conics, opac, colors, rects, order, height, width, background, t_min, record):
    """Composite; with ``record`` also store, per (splat, box pixel), the
    transmittance in front of the splat (-1 when skipped) and its Gaussian value."""
    acc = np.zeros((height, width, 3))
    T = np.ones((height, width))
    best = np.zeros((height, width))
    dominant = np.full((height, width), -1, dtype=np.int64)
    offsets = _box_offsets(rects, order)
    size = offsets[order.shape[0]] if record else 0
    t_before = np.empty(size)
    gauss_buf = np.empty(size)
    for k in range(order.shape[0]):
        g = order[k]
        mx, my = means2d[g, 0], means2d[g, 1]
        ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
        o = opac[g]
        c0, c1, c2 = colors[g, 0], colors[g, 1], colors[g, 2]
        e = offsets[k]
        for py in range(rects[g, 2], rects[g, 3] + 1):
            dy = py - my
            for px in range(rects[g, 0], rects[g, 1] + 1):
                t = T[py, px]
                if t < t_min:
                    if record:
                        t_before[e] = -1.0
                    e += 1
                    continue
                dx = px - mx
                gauss = np.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
                alpha = o * gauss
                if record:
                    t_before[e] = t
                    gauss_buf[e] = gauss
                e += 1
                w = alpha * t
                if w > best[py, px]:
                    best[py, px] = w
                    dominant[py, px] = g
                acc[py, px, 0] += c0 * w
                acc[py, px, 1] += c1 * w
                acc[py, px, 2] += c2 * w
                T[py, px] = t * (1.0 - alpha)
    image = np.empty((height, width, 3))
    for py in range(height):
        for px in range(width):
            t = T[py, px]
            image[py, px, 0] = acc[py, px, 0] + t * background[0]
            image[py, px, 1] = acc[py, px, 1] + t * background[1]
            image[py, px, 2] = acc[py, px, 2] + t * background[2]
    return image, T, dominant, offsets, t_before, gauss_buf


@numba.njit(cache=True)
def _backward_kernel(means2d, conics, opac, colors, rects, order, height, width, background,
                     offsets, t_before, gauss_buf, upstream):
    n = means2d.shape[0]
    m = order.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    # Q: composite of everything behind the current splat, seeded with the background
    q = np.empty((height, width, 3))
    for py in range(height):
        for px in range(width):
            q[py, px, 0] = background[0]
            q[py, px, 1] = background[1]
            q[py, px, 2] = background[2]
    for k in range(m - 1, -1, -1):
        g = order[k]
        mx, my = means2d[g, 0], means2d[g, 1]
        a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
        o = opac[g]
        c0, c1, c2 = colors[g, 0], colors[g, 1], colors[g, 2]
        e = offsets[k]
        gm0 = gm1 = 0.0
        gc0 = gc1 = gc2 = 0.0
        go = 0.0
        gr = gg = gb = 0.0
        for py in range(rects[g, 2], rects[g, 3] + 1):
            dy = py - my
            for px in range(rects[g, 0], rects[g, 1] + 1):
                ti = t_before[e]
                gauss = gauss_buf[e]
                e += 1
                if ti < 0.0:
                    continue
                up0 = upstream[py, px, 0]
                up1 = upstream[py, px, 1]
                up2 = upstream[py, px, 2]
                if up0 == 0.0 and up1 == 0.0 and up2 == 0.0:
                    continue
                dx = px - mx
                alpha = o * gauss
                q0 = q[py, px, 0]
                q1 = q[py, px, 1]
                q2 = q[py, px, 2]
                q[py, px, 0] = c0 * alpha + (1.0 - alpha) * q0
                q[py, px, 1] = c1 * alpha + (1.0 - alpha) * q1
                q[py, px, 2] = c2 * alpha + (1.0 - alpha) * q2
                w = alpha * ti
                gr += up0 * w
                gg += up1 * w
                gb += up2 * w
                g_alpha = ti * (up0 * (c0 - q0) + up1 * (c1 - q1) + up2 * (c2 - q2))
                go += g_alpha * gauss
                g_power = g_alpha * alpha
                gm0 += g_power * (a * dx + b * dy)
                gm1 += g_power * (b * dx + c * dy)
                gc0 += -0.5 * g_power * dx * dx
                gc1 += -g_power * dx * dy
                gc2 += -0.5 * g_power * dy * dy
        g_mean[g, 0] = gm0
        g_mean[g, 1] = gm1
        g_conic[g, 0] = gc0
        g_conic[g, 1] = gc1
        g_conic[g, 2] = gc2
        g_opac[g] = go
        g_color[g, 0] = gr
        g_color[g, 1] = gg
        g_color[g, 2] = gb
    return g_mean, g_conic, g_opac, g_color


def _screen_rects(proj, cam: Camera):
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    rx, ry = proj.radii[:, 0], proj.radii[:, 1]
    rects = np.stack(
        [
            np.clip(np.ceil(u - rx), 0, cam.width - 1),
            np.clip(np.floor(u + rx), 0, cam.width - 1),
            np.clip(np.ceil(v - ry), 0, cam.height - 1),
            np.clip(np.floor(v + ry), 0, cam.height - 1),
        ],
        axis=1,
    )
    rects = np.where(np.isfinite(rects), rects, 0).astype(np.int64)
    return np.ascontiguousarray(rects)


def _prepare(gaussians: Gaussians, pose: Pose, cam: Camera):
    proj = project_gaussians(gaussians, pose, cam)
    valid_idx = np.flatnonzero(proj.valid)
    order = valid_idx[depth_sort(proj.depths[valid_idx])].astype(np.int64)
    rects = _screen_rects(proj, cam)
    return proj, np.ascontiguousarray(order), rects


def _background(background):
    bg = np.asarray(DEFAULT_BACKGROUND if background is None else background, dtype=float).reshape(3)
    return bg


def rasterize(proj, order, rects, cam: Camera, background=None, t_min=DEFAULT_T_MIN, record=False):
    """Returns ``(image, final transmittance, dominant index, buffers)``; ``buffers``
    feed the backward kernel and are empty unless ``record``."""
    bg = _background(background)
    image, final_t, dominant, offsets, t_before, gauss = _forward_kernel(
        np.ascontiguousarray(proj.means2d),
        np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(proj.opacities),
        np.ascontiguousarray(proj.colors, dtype=float),
        rects,
        order,
        cam.height,
        cam.width,
        bg,
        float(t_min),
        record,
    )
    return image, final_t, dominant, (offsets, t_before, gauss)


def render(gaussians: Gaussians, pose: Pose, cam: Camera, background=None, t_min=DEFAULT_T_MIN):
    """Alpha-composite the scene seen from ``pose``; returns an ``(H, W, 3)`` image."""
    proj, order, rects = _prepare(gaussians, pose, cam)
    return rasterize(proj, order, rects, cam, background, t_min)[0]


def render_dominant(gaussians: Gaussians, pose: Pose, cam: Camera, t_min=DEFAULT_T_MIN):
    """Per pixel: index of the splat with the largest blending weight (-1 if none),
    its view-space depth, and the accumulated opacity."""
    proj, order, rects = _prepare(gaussians, pose, cam)
    _, final_t, dominant, _ = rasterize(proj, order, rects, cam, None, t_min)
    depth = np.where(dominant >= 0, proj.depths[np.maximum(dominant, 0)], np.inf)
    return dominant, depth, 1.0 - final_t


@dataclass
class RenderPass:
    """Forward state kept so the backward kernel can run without re-rendering."""

    gaussians: Gaussians
    pose: Pose
    proj: object
    order: np.ndarray
    rects: np.ndarray
    background: np.ndarray
    buffers: tuple
    image: np.ndarray


def forward_pass(gaussians: Gaussians, pose: Pose, cam: Camera, background=None, t_min=DEFAULT_T_MIN) -> RenderPass:
    proj, order, rects = _prepare(gaussians, pose, cam)
    image, _, _, buffers = rasterize(proj, order, rects, cam, background, t_min, record=True)
    return RenderPass(gaussians, pose, proj, order, rects, _background(background), buffers, image)


def backward_pass(rp: RenderPass, cam: Camera, upstream) -> RenderGradients:
    """Gradients of ``sum(upstream * rp.image)``."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} does not match camera {cam.height}x{cam.width}")
    proj = rp.proj
    offsets, t_before, gauss = rp.buffers
    g_mean, g_conic, g_opac, g_color = _backward_kernel(
        np.ascontiguousarray(proj.means2d),
        np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(proj.opacities),
        np.ascontiguousarray(proj.colors, dtype=float),
        rp.rects,
        rp.order,
        cam.height,
        cam.width,
        rp.background,
        offsets,
        t_before,
        gauss,
        np.ascontiguousarray(upstream),
    )
    grads, pose_grad = projection_vjp(rp.gaussians, proj, cam, g_mean, g_conic, g_opac, g_color)
    return RenderGradients(grads, pose_grad, np.linalg.norm(g_mean, axis=1))


def render_with_grad(gaussians: Gaussians, pose: Pose, cam: Camera, upstream, background=None, t_min=DEFAULT_T_MIN):
    """Render and backpropagate ``sum(upstream * image)``.

    Returns ``(image, RenderGradients)``; the pose gradient is a right-tangent
    6-vector (rotation first, then camera-frame translation).
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} does not match camera {cam.height}x{cam.width}")
    rp = forward_pass(gaussians, pose, cam, background, t_min)
    return rp.image, backward_pass(rp, cam, upstream)
