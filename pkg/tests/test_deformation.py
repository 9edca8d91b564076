import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deblur_splat import gradcheck
from deblur_splat.deformation import (
    DeformationField,
    deform_gaussians,
    deform_gaussians_grid,
    deform_gaussians_grid_vjp,
    deform_gaussians_vjp,
    encode,
)
from deblur_splat.errors import StateError
from deblur_splat.scene import GaussianGrads


def test_encode_examples():
    assert np.allclose(encode([0.0], 2), [0, 0, 1, 0, 1])
    assert encode(np.zeros(3), 5).shape == (3 * 11,)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), st.integers(1, 6))
def test_encode_is_two_periodic_in_the_sinusoids(v, L):
    a, b = encode(v, L), encode(v + 2.0, L)
    assert np.allclose(a[3:], b[3:], atol=1e-9)


def test_fresh_field_is_identity():
    f = DeformationField(3, 16, 4, 3).initialize(np.random.default_rng(0))
    dx, dr, ds = f.deform(np.random.default_rng(1).normal(size=(5, 3)), 0.3)
    assert np.all(dx == 0) and np.all(dr == 0) and np.all(ds == 0)


def test_field_use_before_initialize_raises():
    with pytest.raises(StateError):
        DeformationField().deform(np.zeros((1, 3)), 0.5)
    with pytest.raises(StateError):
        DeformationField().initialize(np.random.default_rng(0)).deform_backward(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 3)))


def trained_field(seed=0):
    rng = np.random.default_rng(seed)
    f = DeformationField(3, 16, 4, 3).initialize(rng)
    for k in f.params:
        f.params[k] += rng.normal(0, 0.1, f.params[k].shape)
    return f


def test_batched_equals_per_element():
    f = trained_field()
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(6, 3)), rng.uniform(size=6)
    out, _ = f.forward(x, t)
    for i in range(6):
        single, _ = f.forward(x[i : i + 1], t[i])
        assert np.allclose(out[i], single[0], atol=1e-9)


def test_grid_forward_matches_expanded_rows():
    f = trained_field()
    rng = np.random.default_rng(3)
    x, t = rng.normal(size=(5, 3)), rng.uniform(size=4)
    grid, _ = f.forward_grid(x, t)
    flat, _ = f.forward(np.tile(x, (4, 1)), np.repeat(t, 5))
    assert np.allclose(grid, flat, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    f = trained_field()
    x = np.random.default_rng(4).normal(size=(4, 3))
    f.deform(x, 0.5)
    grads, g_means = f.deform_backward(np.zeros((4, 3)), np.zeros((4, 4)), np.zeros((4, 3)))
    assert all(np.all(v == 0) for v in grads.values()) and np.all(g_means == 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_field_gradients_match_finite_differences(seed):
    errs = gradcheck.check_deformation(seed)
    assert max(errs.values()) < 1e-4, errs


def test_fields_only_move_their_own_tag():
    rng = np.random.default_rng(5)
    g = gradcheck.random_scene(rng, 10, dynamic_fraction=0.5)
    f = trained_field()
    moved, _ = deform_gaussians(g, {"dynamic": f}, 0.4)
    still = ~g.is_dynamic
    assert np.array_equal(moved.means[still], g.means[still])
    assert not np.allclose(moved.means[g.is_dynamic], g.means[g.is_dynamic])


def test_grid_vjp_sums_the_per_time_vjps():
    rng = np.random.default_rng(6)
    g = gradcheck.random_scene(rng, 7, dynamic_fraction=0.5)
    fields = {"dynamic": trained_field(1), "static": DeformationField(3, 16, 4, 3, role="static")}
    fields["static"].params = trained_field(2).params
    times = np.array([0.2, 0.5, 0.7])
    stacked, rec = deform_gaussians_grid(g, fields, times)
    up = GaussianGrads(**{k: rng.normal(size=v.shape) for k, v in stacked.params().items()})
    total, fg = deform_gaussians_grid_vjp(g, fields, rec, up)
    n = len(g)
    ref_total = GaussianGrads.zeros(n)
    ref_fields = {}
    for j, t in enumerate(times):
        moved, r = deform_gaussians(g, fields, t)
        assert np.allclose(moved.means, stacked.means[j * n : (j + 1) * n])
        part = GaussianGrads(**{k: v[j * n : (j + 1) * n] for k, v in up.as_dict().items()})
        cg, pg = deform_gaussians_vjp(g, fields, r, part)
        ref_total += cg
        for role, d in pg.items():
            acc = ref_fields.setdefault(role, {k: 0.0 for k in d})
            for k in d:
                acc[k] = acc[k] + d[k]
    for k, v in ref_total.as_dict().items():
        assert np.allclose(getattr(total, k), v, atol=1e-10)
    for role in ref_fields:
        for k in ref_fields[role]:
            assert np.allclose(fg[role][k], ref_fields[role][k], atol=1e-10)
