import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from affordkit.costs import (GuidanceConfig, cost_collide, cost_goal, cost_normal, cost_total,
                             cost_total_batch, evaluate_terms, fibonacci_sphere, gripper_points)
from affordkit.errors import DegenerateSegment, EmptyAgentPoints, EmptyGoals
from affordkit.gradcheck import check_collide, check_goal, check_normal, smooth_volume
from affordkit.tsdf import TsdfVolume


def const_volume(value):
    return TsdfVolume([-1, -1, -1], 0.5, (5, 5, 5), 0.1, np.full((5, 5, 5), value),
                      np.ones((5, 5, 5)))


def full_cfg(**kw):
    base = dict(goals=np.array([[0.3, 0.0, 0.0], [0.0, 0.3, 0.1]]),
                agent_points=gripper_points([0, 0, 0], 8, "sphere", [0.02]),
                normal=np.array([0.0, 0.6, 0.8]), volume=smooth_volume())
    base.update(kw)
    return GuidanceConfig(**base)


# goal -------------------------------------------------------------------------

def test_goal_examples():
    tau = np.array([[0, 0, 0], [0, 0, 1.0]])
    J, g = cost_goal(tau, [[0, 0, 1.0]])
    assert J == 0 and not g.any()
    tau = np.array([[5, 5, 5], [1.0, 0, 0]])
    J, g = cost_goal(tau, [[0, 0, 0], [3, 0, 0]])
    assert J == 1.0
    assert np.array_equal(g[-1], [2.0, 0, 0]) and not g[0].any()


def test_goal_tie_lowest_index():
    tau = np.array([[0, 0, 0], [0, 0, 0.0]])
    J, g = cost_goal(tau, [[1.0, 0, 0], [-1.0, 0, 0]])
    assert J == 1.0
    assert np.array_equal(g[-1], [-2.0, 0, 0])


def test_goal_empty():
    with pytest.raises(EmptyGoals):
        cost_goal(np.zeros((3, 3)), np.zeros((0, 3)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (5, 3), elements=st.floats(-1, 1)), st.permutations(range(5)))
def test_goal_permutation_invariant(tau, goals, perm):
    a = cost_goal(tau, goals)[0]
    b = cost_goal(tau, goals[list(perm)])[0]
    assert a == b


# collide ------------------------------------------------------------------------

def test_collide_free_space():
    tau = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0.1, 0]])
    J, g = cost_collide(tau, [[0, 0, 0], [0.01, 0, 0]], const_volume(0.3))
    assert J == 0.0 and not g.any()


def test_collide_single_query():
    tau = np.array([[0, 0, 0], [0.1, 0.0, 0.0]])
    J, g = cost_collide(tau, [[0.0, 0.0, 0.0]], const_volume(-0.1))
    assert J == pytest.approx(0.1, abs=1e-15)
    assert not g[0].any()


def test_collide_unobserved_is_free():
    tau = np.array([[0, 0, 0], [5.0, 0, 0]])
    assert cost_collide(tau, [[0, 0, 0]], const_volume(-1.0))[0] == 0.0


def test_collide_empty_agent():
    with pytest.raises(EmptyAgentPoints):
        cost_collide(np.zeros((3, 3)), np.zeros((0, 3)), const_volume(1.0))


def test_collide_finite_difference():
    assert check_collide(seed=1, n_points=20) < 1e-4


def test_collide_batch_matches_loop():
    rng = np.random.default_rng(0)
    vol = smooth_volume()
    P = rng.normal(scale=0.02, size=(6, 3))
    T = rng.normal(scale=0.15, size=(5, 7, 3))
    J, g = cost_collide(T, P, vol)
    for b in range(5):
        Jb, gb = cost_collide(T[b], P, vol)
        assert J[b] == Jb and np.array_equal(g[b], gb)


# normal -------------------------------------------------------------------------

def test_normal_examples():
    n = np.array([0.0, 0.6, 0.8])
    line = np.outer(np.arange(5.0), n)
    assert cost_normal(line, n)[0] == pytest.approx(0.0, abs=1e-15)
    assert cost_normal(-line, n)[0] == pytest.approx(0.0, abs=1e-15)
    ortho = np.outer(np.arange(5.0), [1.0, 0, 0])
    assert cost_normal(ortho, n)[0] == pytest.approx(2.0, abs=1e-15)


def test_normal_degenerate_segment():
    tau = np.array([[0, 0, 0], [1.0, 0, 0], [0, 0, 0]])
    with pytest.raises(DegenerateSegment):
        cost_normal(tau, [0, 0, 1.0])


def test_normal_finite_difference():
    assert check_normal(seed=2, n_points=20) < 1e-4


def test_goal_finite_difference():
    assert check_goal(seed=3, n_points=20) < 1e-4


# totals -------------------------------------------------------------------------

def test_total_zero_weights():
    tau = np.random.default_rng(0).normal(scale=0.1, size=(6, 3))
    r = cost_total(tau, full_cfg(lambda_g=0, lambda_c=0, lambda_n=0))
    assert r.total == 0.0 and not r.gradient.any()


def test_total_goal_only():
    tau = np.random.default_rng(1).normal(scale=0.1, size=(6, 3))
    cfg = full_cfg(lambda_g=1.0, lambda_c=0, lambda_n=0)
    J, g = cost_goal(tau, cfg.goals)
    r = cost_total(tau, cfg)
    assert r.total == J
    assert np.array_equal(r.gradient, g)


def test_total_validation():
    with pytest.raises(EmptyGoals):
        GuidanceConfig(1.0, 0, 0).validate()
    with pytest.raises(EmptyAgentPoints):
        GuidanceConfig(0, 1.0, 0).validate()
    with pytest.raises(ValueError):
        GuidanceConfig(0, 0, 1.0, normal=np.array([0, 0, 2.0])).validate()
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0, 0, 0).validate()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_total_scaling(seed, c):
    rng = np.random.default_rng(seed)
    T = rng.normal(scale=0.15, size=(12, 6, 3))
    cfg = full_cfg()
    a = cost_total_batch(T, cfg)
    b = cost_total_batch(T, cfg.scaled(c))
    assert np.allclose(b["total"], c * a["total"], rtol=1e-12, atol=0)
    assert np.allclose(b["gradient"], c * a["gradient"], rtol=1e-12, atol=1e-300)
    assert np.argmin(a["total"]) == np.argmin(b["total"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_costs_nonnegative_and_start_fixed(seed):
    rng = np.random.default_rng(seed)
    T = rng.normal(scale=0.2, size=(8, 5, 3))
    out = cost_total_batch(T, full_cfg())
    for k in ("goal", "collide", "normal", "total"):
        assert np.all(out[k] >= 0)
    assert not out["gradient"][:, 0].any()


def test_total_single_matches_batch():
    T = np.random.default_rng(4).normal(scale=0.2, size=(3, 5, 3))
    cfg = full_cfg()
    batch = cost_total_batch(T, cfg)
    for b in range(3):
        r = cost_total(T[b], cfg)
        assert r.total == batch["total"][b]
        assert np.array_equal(r.gradient, batch["gradient"][b])


def test_evaluate_terms_reports_missing_as_nan():
    T = np.random.default_rng(5).normal(size=(2, 4, 3))
    out = evaluate_terms(T, GuidanceConfig(0, 0, 0, goals=np.zeros((1, 3))))
    assert np.all(np.isfinite(out["goal"]))
    assert np.all(np.isnan(out["collide"])) and np.all(np.isnan(out["normal"]))


# agent points -------------------------------------------------------------------

def test_gripper_points():
    s = fibonacci_sphere(64)
    assert np.allclose(np.linalg.norm(s, axis=1), 1.0)
    assert np.allclose(s.mean(0), 0, atol=0.02)
    box = gripper_points([1, 2, 3], 32, "box", (0.02, 0.08, 0.04))
    assert box.shape == (32, 3)
    rel = np.abs(box - [1, 2, 3]) / [0.01, 0.04, 0.02]
    assert np.allclose(rel.max(axis=1), 1.0)
    sph = gripper_points([0, 0, 0], 10, "sphere", [0.03], object_points=np.ones((4, 3)))
    assert sph.shape == (14, 3)
    assert np.allclose(np.linalg.norm(sph[:10], axis=1), 0.03)
    assert np.array_equal(gripper_points([0, 0, 0], 16), gripper_points([0, 0, 0], 16))
    with pytest.raises(ValueError):
        gripper_points([0, 0, 0], 4, "cone")
