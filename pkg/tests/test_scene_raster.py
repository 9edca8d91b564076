import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deblur_splat import gradcheck
from deblur_splat.lie import Pose, so3_exp
from deblur_splat.raster import render, render_dominant, render_with_grad
from deblur_splat.scene import (
    DILATION,
    STATIC,
    Camera,
    Gaussians,
    covariance_from_params,
    depth_sort,
    logit,
    project_gaussian,
    project_gaussians,
)


def one_gaussian(mean, scale, color=(1.0, 0.0, 0.0), opacity_logit=10.0, quat=(1, 0, 0, 0)):
    return Gaussians(
        means=np.array([mean], dtype=float),
        log_scales=np.log(np.array([scale], dtype=float)),
        quats=np.array([quat], dtype=float),
        opacity_logits=np.array([opacity_logit]),
        colors=np.array([color], dtype=float),
        tags=np.array([STATIC]),
    )


def test_covariance_examples():
    assert np.allclose(covariance_from_params(np.zeros(3), [1, 0, 0, 0]), np.eye(3))
    cov = covariance_from_params(np.log([2.0, 1.0, 1.0]), so3_exp([0, 0, np.pi / 2]))
    assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]))


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ls = rng.normal(0, 0.5, 3)
        q = rng.normal(size=4)
        ev = np.linalg.eigvalsh(covariance_from_params(ls, q / np.linalg.norm(q)))
        assert np.allclose(np.sort(ev), np.sort(np.exp(2 * ls)))


def test_projection_of_axis_point_hits_principal_point():
    cam = Camera(100, 100, 64, 64, 128, 128)
    p = project_gaussian(one_gaussian([0, 0, 1], [0.01] * 3), Pose.identity(), cam)
    assert np.allclose(p.mean, [64, 64])


def test_isotropic_projection_is_axis_aligned():
    cam = Camera(100, 120, 64, 64, 128, 128)
    s, z = 0.05, 2.0
    p = project_gaussian(one_gaussian([0, 0, z], [s] * 3), Pose.identity(), cam)
    expect = np.diag([(100 * s / z) ** 2, (120 * s / z) ** 2]) + DILATION * np.eye(2)
    assert np.allclose(p.cov, expect)


def test_projected_mean_matches_monte_carlo():
    rng = np.random.default_rng(3)
    cam = Camera(80, 80, 32, 32, 64, 64)
    g = one_gaussian([0.2, -0.1, 3.0], [0.05, 0.02, 0.04], quat=[0.9, 0.1, 0.3, -0.2])
    pose = Pose(so3_exp([0.02, -0.03, 0.01]), [0.05, 0.0, -0.1])
    p = project_gaussian(g, pose, cam)
    cov = covariance_from_params(g.log_scales[0], g.quats[0] / np.linalg.norm(g.quats[0]))
    pts = rng.multivariate_normal(g.means[0], cov, 1000)
    W, tv = pose.world_to_view()
    xc = pts @ W.T + tv
    uv = np.stack([80 * xc[:, 0] / xc[:, 2] + 32, 80 * xc[:, 1] / xc[:, 2] + 32], 1)
    se = uv.std(axis=0) / np.sqrt(len(uv))
    assert np.all(np.abs(uv.mean(axis=0) - p.mean) < 3 * se + 1e-3)


def test_behind_camera_is_culled():
    cam = Camera(100, 100, 64, 64, 128, 128)
    assert project_gaussian(one_gaussian([0, 0, -1], [0.1] * 3), Pose.identity(), cam) is None


def test_depth_sort_examples():
    assert list(depth_sort([3, 1, 2])) == [1, 2, 0]
    assert list(depth_sort([1, 2, 3])) == [0, 1, 2]
    assert list(depth_sort([2, 1, 2, 1])) == [1, 3, 0, 2]


def test_empty_scene_is_background():
    cam = Camera(20, 20, 8, 8, 16, 16)
    img = render(Gaussians.empty(), Pose.identity(), cam, background=[0.1, 0.2, 0.3])
    assert np.allclose(img, [0.1, 0.2, 0.3])


def test_single_splat_closed_form():
    # Sigma' = I after dilation: pick sigma so that (f s / z)^2 = 0.7
    cam = Camera(100, 100, 8, 8, 16, 16)
    z = 5.0
    s = np.sqrt(1 - DILATION) * z / 100
    bg = np.array([0.2, 0.4, 0.6])
    img = render(one_gaussian([0, 0, z], [s, s, s]), Pose.identity(), cam, background=bg)
    a = 1 / (1 + np.exp(-10.0))
    assert np.allclose(img[8, 8], bg * (1 - a) + np.array([1, 0, 0]) * a, atol=1e-12)
    d2 = 1.0  # one pixel off-center, unit covariance
    a1 = a * np.exp(-0.5 * d2)
    assert np.allclose(img[8, 9], bg * (1 - a1) + np.array([1, 0, 0]) * a1, atol=1e-12)


def _scalar_composite(g: Gaussians, pose, cam, bg, px, py):
    """Independent per-pixel evaluation of the front-to-back compositing sum."""
    proj = project_gaussians(g, pose, cam)
    order = np.argsort(proj.depths, kind="stable")
    color = np.zeros(3)
    T = 1.0
    for i in order:
        if not proj.valid[i]:
            continue
        d = np.array([px, py]) - proj.means2d[i]
        if abs(d[0]) > proj.radii[i, 0] or abs(d[1]) > proj.radii[i, 1]:
            continue
        if T < 1e-4:
            break
        inv = np.linalg.inv(proj.cov2d[i])
        alpha = proj.opacities[i] * np.exp(-0.5 * d @ inv @ d)
        color += T * alpha * proj.colors[i]
        T *= 1 - alpha
    return color + T * bg


def test_two_overlapping_splats_match_scalar_formula():
    cam = Camera(30, 30, 7.5, 7.5, 16, 16)
    g = Gaussians.concat([
        one_gaussian([0.05, 0.0, 2.0], [0.15, 0.1, 0.1], (0.9, 0.2, 0.1), 0.5, [0.9, 0.1, 0.2, 0.0]),
        one_gaussian([-0.1, 0.05, 2.5], [0.2, 0.2, 0.1], (0.1, 0.3, 0.8), 1.5),
    ])
    bg = np.array([0.05, 0.1, 0.15])
    img = render(g, Pose.identity(), cam, background=bg)
    for py in range(0, 16, 3):
        for px in range(0, 16, 3):
            assert np.allclose(img[py, px], _scalar_composite(g, Pose.identity(), cam, bg, px, py), atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(0)
    g = gradcheck.random_scene(rng, 6)
    cam = gradcheck.SMALL_CAMERA
    _, grads = render_with_grad(g, Pose.identity(), cam, np.zeros((16, 16, 3)))
    assert all(np.all(v == 0) for v in grads.gaussians.as_dict().values())
    assert np.all(grads.pose == 0)


@pytest.mark.parametrize("seed,n", [(0, 5), (1, 9), (2, 14), (3, 20)])
def test_render_gradients_match_finite_differences(seed, n):
    errs = gradcheck.check_render(seed, n)
    assert max(errs.values()) < 1e-4, errs


def test_occluded_color_gets_no_gradient():
    cam = Camera(30, 30, 7.5, 7.5, 16, 16)
    front = one_gaussian([0, 0, 2.0], [20.0, 20.0, 0.1], (0.2, 0.2, 0.2), 10.0)
    back = one_gaussian([0, 0, 3.0], [0.1, 0.1, 0.1], (0.9, 0.1, 0.1), 0.0)
    g = Gaussians.concat([front, back])
    up = np.random.default_rng(0).normal(size=(16, 16, 3))
    _, grads = render_with_grad(g, Pose.identity(), cam, up)
    assert np.max(np.abs(grads.gaussians.colors[1])) < 1e-6


def test_dominant_index_is_the_front_opaque_splat():
    cam = Camera(30, 30, 7.5, 7.5, 16, 16)
    g = Gaussians.concat([
        one_gaussian([0, 0, 3.0], [0.3] * 3, opacity_logit=logit(0.9)),
        one_gaussian([0, 0, 2.0], [0.3] * 3, opacity_logit=logit(0.9)),
    ])
    dom, depth, coverage = render_dominant(g, Pose.identity(), cam)
    assert dom[8, 8] == 1
    assert depth[8, 8] == 2.0
    assert 0.9 < coverage[8, 8] < 1.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(0.0, 1.0)), st.integers(0, 1000))
def test_render_is_a_convex_mix_of_colors_and_background(colors, seed):
    rng = np.random.default_rng(seed)
    g = gradcheck.random_scene(rng, 4)
    g.colors[:] = colors
    bg = rng.uniform(size=3)
    img = render(g, gradcheck.random_pose(rng), gradcheck.SMALL_CAMERA, background=bg)
    lo = np.minimum(colors.min(axis=0), bg) - 1e-12
    hi = np.maximum(colors.max(axis=0), bg) + 1e-12
    assert np.all(img >= lo) and np.all(img <= hi)
