import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from affordkit.errors import InvalidDepth, LogNearPi, NonPositiveDepth
from affordkit.geom import (Intrinsics, Pose, backproject, hat, project, rotation_angle,
                            sample_depth, se3_exp, se3_log, transform_point)

K = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def expm_series(A, terms=40):
    """Plain Taylor-series matrix exponential, used as an independent oracle."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms):
        term = term @ A / n
        out = out + term
    return out


def twist_matrix(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[:3])
    M[:3, 3] = xi[3:]
    return M


# examples -------------------------------------------------------------------

def test_project_examples():
    assert np.allclose(project([0, 0, 1], K), [50, 50])
    assert project([0.1, 0, 1], K)[0] == pytest.approx(60.0)
    with pytest.raises(NonPositiveDepth):
        project([0, 0, -1], K)
    with pytest.raises(NonPositiveDepth):
        project([0, 0, 1e-7], K)


def test_backproject_examples():
    assert np.allclose(backproject([50, 50], 1.0, K), [0, 0, 1])
    assert np.allclose(backproject([60, 50], 2.0, K), [0.2, 0, 2])
    for bad in (0.0, -1.0, np.nan, np.inf):
        with pytest.raises(InvalidDepth):
            backproject([50, 50], bad, K)


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    assert Intrinsics.from_dict(K.to_dict()) == K


def test_exp_examples():
    assert se3_exp(np.zeros(6)) == Pose.identity()
    T = se3_exp([0, 0, np.pi / 2, 0, 0, 0])
    assert np.allclose(transform_point(T, [1, 0, 0]), [0, 1, 0], atol=1e-9)


def test_transform_examples():
    assert np.allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(transform_point(Pose(t=[0, 0, 1]), [0, 0, 0]), [0, 0, 1])


def test_log_near_pi():
    with pytest.raises(LogNearPi):
        se3_log(se3_exp([np.pi, 0, 0, 0, 0, 0]))


def test_exp_matches_series_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        xi = rng.normal(size=6)
        xi[:3] *= 1.2 / np.linalg.norm(xi[:3])
        assert np.allclose(se3_exp(xi).matrix(), expm_series(twist_matrix(xi)), atol=1e-12)


def test_exp_frozen_value():
    # computed once with the Taylor-series oracle above
    T = se3_exp([0.1, -0.2, 0.3, 0.5, -0.4, 0.25])
    M = expm_series(twist_matrix(np.array([0.1, -0.2, 0.3, 0.5, -0.4, 0.25])))
    assert np.allclose(T.matrix(), M, atol=1e-13)
    assert np.allclose(T.t, [0.52640112534, -0.335743214163, 0.284037482112], atol=1e-11)


def test_log_of_tiny_rotation():
    xi = np.array([1e-9, -2e-9, 3e-10, 0.1, 0.2, 0.3])
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


def test_quaternion_is_normalized_after_composition():
    rng = np.random.default_rng(0)
    T = Pose.identity()
    for _ in range(500):
        T = T @ se3_exp(rng.normal(scale=0.3, size=6))
    assert abs(np.linalg.norm(T.q) - 1.0) < 1e-12


def test_pose_is_immutable():
    T = Pose(t=[1, 2, 3])
    with pytest.raises(ValueError):
        T.t[0] = 5.0


def test_sample_depth_exact_on_plane():
    # inverse depth of a tilted plane is affine in (u, v)
    rows, cols = np.mgrid[0:20, 0:30]
    inv = 0.5 + 0.01 * cols - 0.005 * rows
    D = 1.0 / inv
    uv = np.array([[3.3, 7.8], [10.0, 2.0], [28.9, 18.1]])
    z, _, _ = sample_depth(D, uv)
    want = 1.0 / (0.5 + 0.01 * uv[:, 0] - 0.005 * uv[:, 1])
    assert np.allclose(z, want, rtol=1e-12)


def test_sample_depth_invalid_stencil():
    D = np.ones((5, 5))
    D[2, 2] = np.nan
    z, _, _ = sample_depth(D, np.array([[1.5, 1.5], [0.5, 0.5], [-1.0, 0.0]]))
    assert np.isnan(z[0]) and z[1] == 1.0 and np.isnan(z[2])


# properties -----------------------------------------------------------------

twists = arrays(np.float64, 6, elements=st.floats(-1.5, 1.5))
points = arrays(np.float64, 3, elements=st.floats(-10, 10))


@settings(max_examples=200, deadline=None)
@given(twists)
def test_exp_log_round_trip(xi):
    xi = xi.copy()
    th = np.linalg.norm(xi[:3])
    if th > 3.0:
        xi[:3] *= 3.0 / th
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(twists, points)
def test_inverse_round_trip(xi, p):
    T = se3_exp(xi)
    assert np.allclose(transform_point(T.inverse(), transform_point(T, p)), p, atol=1e-9)
    assert np.allclose((T.inverse() @ T).matrix(), np.eye(4), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(twists, twists, twists)
def test_composition_associative(a, b, c):
    A, B, C = se3_exp(a), se3_exp(b), se3_exp(c)
    assert np.allclose(((A @ B) @ C).matrix(), (A @ (B @ C)).matrix(), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 99), st.floats(0, 99), st.floats(0.01, 50))
def test_project_backproject(u, v, d):
    assert np.allclose(project(backproject([u, v], d, K), K), [u, v], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.floats(0.0, 3.0))
def test_rotation_angle(axis, angle):
    n = np.linalg.norm(axis)
    if n < 1e-3:
        return
    R = se3_exp(np.concatenate([axis / n * angle, np.zeros(3)])).R
    assert rotation_angle(R) == pytest.approx(angle, abs=1e-6)
