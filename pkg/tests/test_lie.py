import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deblur_splat.lie import (
    Pose,
    apply_delta,
    interpolate_pose_sequence,
    interpolate_rotation,
    midpoint_pose,
    quat_canonical,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    rotation_angle,
    so3_exp,
    so3_log,
)

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
quat = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def angle_between(a, b):
    return rotation_angle(quat_multiply(quat_conjugate(a), b))


def same_rotation(a, b, atol=1e-9):
    return np.allclose(quat_to_matrix(a), quat_to_matrix(b), atol=atol)


def test_exp_zero_is_identity():
    assert np.allclose(so3_exp([0, 0, 0]), [1, 0, 0, 0])


def test_exp_quarter_turn_about_z():
    q = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_log_examples():
    assert np.allclose(so3_log([1, 0, 0, 0]), 0)
    assert np.allclose(so3_log(so3_exp([0, 0, np.pi / 2])), [0, 0, np.pi / 2], atol=1e-12)


def test_round_trips_on_1000_random_samples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        assert np.max(np.abs(so3_log(so3_exp(w)) - w)) < 1e-9
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        assert same_rotation(so3_exp(so3_log(q)), q)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_log_inverts_exp_inside_the_ball(w):
    n = np.linalg.norm(w)
    if n > 3.0:
        w = w * 3.0 / n
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(quat)
def test_exp_inverts_log(q):
    q = q / np.linalg.norm(q)
    assert same_rotation(so3_exp(so3_log(q)), q)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_small_angles_stay_accurate(w):
    w = w * 1e-9
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-15)


def test_interpolation_endpoints_and_half_turn():
    a, b = so3_exp([0.1, -0.2, 0.3]), so3_exp([-0.4, 0.2, 0.1])
    assert same_rotation(interpolate_rotation(a, b, 0.0), a)
    assert same_rotation(interpolate_rotation(a, b, 1.0), b)
    half = interpolate_rotation([1, 0, 0, 0], so3_exp([0, 0, np.pi / 2]), 0.5)
    assert same_rotation(half, so3_exp([0, 0, np.pi / 4]))


def test_interpolation_rejects_out_of_range_fraction():
    with pytest.raises(ValueError):
        interpolate_rotation([1, 0, 0, 0], [1, 0, 0, 0], 1.5)


def test_geodesic_angle_scales_with_fraction_on_1000_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a = quat_canonical(rng.normal(size=4))
        b = quat_canonical(rng.normal(size=4))
        f = rng.uniform()
        total = angle_between(a, b)
        assert abs(angle_between(a, interpolate_rotation(a, b, f)) - f * total) < 1e-8


@settings(max_examples=100, deadline=None)
@given(quat, quat, st.floats(0.0, 1.0))
def test_interpolated_rotation_lies_on_the_geodesic(a, b, f):
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    r = interpolate_rotation(a, b, f)
    total = angle_between(a, b)
    assert abs(angle_between(a, r) + angle_between(r, b) - total) < 1e-7


def test_pose_sequence_examples():
    p = Pose(so3_exp([0.1, 0.2, 0.3]), [1, 2, 3])
    assert all(q.allclose(p) for q in interpolate_pose_sequence(p, p, 5))
    seq = interpolate_pose_sequence(Pose.identity(), Pose([1, 0, 0, 0], [1, 0, 0]), 4)
    assert np.allclose([q.translation[0] for q in seq], [0, 0.25, 0.5, 0.75, 1.0])
    a, b = Pose(so3_exp([0.3, 0, 0]), [0, 1, 0]), Pose(so3_exp([0, -0.2, 0.5]), [1, 0, 2])
    assert interpolate_pose_sequence(a, b, 2)[1].allclose(midpoint_pose(a, b))


def test_apply_delta_identities():
    p = Pose(so3_exp([0.3, -0.1, 0.7]), [0.5, -2.0, 1.0])
    assert apply_delta(p, Pose.identity()).allclose(p)
    assert apply_delta(Pose.identity(), p).allclose(p)
    assert apply_delta(p, p.inverse()).allclose(Pose.identity())


def test_midpoint_examples():
    p = Pose(so3_exp([0.3, -0.1, 0.7]), [0.5, -2.0, 1.0])
    assert midpoint_pose(p, p).allclose(p)
    m = midpoint_pose(Pose.identity(), Pose([1, 0, 0, 0], [2, 0, 0]))
    assert np.allclose(m.translation, [1, 0, 0])
    rz = lambda deg: so3_exp([0, 0, np.deg2rad(deg)])
    m = midpoint_pose(Pose(p.rotation, p.translation), Pose(quat_multiply(p.rotation, rz(90)), p.translation))
    assert same_rotation(m.rotation, quat_multiply(p.rotation, rz(45)))


@settings(max_examples=100, deadline=None)
@given(quat, vec3, quat, vec3)
def test_compose_with_inverse_is_identity(q1, t1, q2, t2):
    a = Pose(q1 / np.linalg.norm(q1), t1)
    b = Pose(q2 / np.linalg.norm(q2), t2)
    assert a.compose(a.inverse()).allclose(Pose.identity(), atol=1e-9)
    pts = np.array([[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]])
    assert np.allclose(a.compose(b).transform(pts), a.transform(b.transform(pts)), atol=1e-9)
