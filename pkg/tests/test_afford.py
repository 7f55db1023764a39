import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from affordkit import afford, metric
from affordkit.errors import (DimensionMismatch, EmptyHandMask, NothingAboveThreshold,
                              NoValidHandDepth, NoVisiblePoints)
from affordkit.geom import Intrinsics, project
from affordkit.ingest import FrameObservation, SceneBundle, SynthConfig, synth_scene

K = Intrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


def truth_refinement(scene, gt):
    return metric.RefinementResult(list(gt.poses_sfm), np.asarray(gt.frame_scales, float), 0)


def repeat_frame(scene, n):
    f = scene.frames[0]
    frames = [FrameObservation(i, f.depth, f.hand_mask, f.object_mask, f.pose_init, f.intrinsics)
              for i in range(n)]
    return SceneBundle(frames, scene.landmarks)


@pytest.fixture(scope="module")
def line_scene():
    scene, gt = synth_scene(SynthConfig(hand_path="line"), seed=0)
    res = metric.refine_poses_scales(scene, metric.solve_global_scale(scene).s_g)
    return scene, gt, res


# trajectory -------------------------------------------------------------------

def test_line_blob_trajectory(line_scene):
    scene, gt, res = line_scene
    W = afford.extract_trajectory(scene, res).waypoints
    assert W.shape == (len(scene.frames), 3)
    assert np.linalg.norm(W[0] - gt.hand_trajectory[0]) < 1e-3
    assert np.linalg.norm(W[-1] - gt.hand_trajectory[-1]) < 1e-3
    d = (W[-1] - W[0]) / np.linalg.norm(W[-1] - W[0])
    off = (W - W[0]) - np.outer((W - W[0]) @ d, d)
    assert np.max(np.linalg.norm(off, axis=1)) < 1e-3


def test_static_blob_repeated_frames():
    scene, gt = synth_scene(SynthConfig(n_frames=3), seed=0)
    rep = repeat_frame(scene, 5)
    res = metric.RefinementResult([rep.frames[0].pose_init] * 5, np.full(5, 2.0), 0)
    W = afford.extract_trajectory(rep, res).waypoints
    assert np.max(np.abs(W - W[0])) < 1e-6


def test_static_path_is_nearly_constant():
    scene, gt = synth_scene(SynthConfig(hand_path="static"), seed=0)
    W = afford.extract_trajectory(scene, truth_refinement(scene, gt)).waypoints
    assert np.max(np.linalg.norm(W - W[0], axis=1)) < 5e-3


def test_empty_hand_mask():
    scene, _ = synth_scene(SynthConfig(n_frames=3), seed=0)
    f = scene.frames[1]
    frames = list(scene.frames)
    frames[1] = FrameObservation(f.index, f.depth, np.zeros_like(f.hand_mask), f.object_mask,
                                 f.pose_init, f.intrinsics)
    bad = SceneBundle(frames, scene.landmarks)
    with pytest.raises(EmptyHandMask) as e:
        afford.extract_trajectory(bad, metric.RefinementResult(
            [g.pose_init for g in bad.frames], np.full(3, 2.0), 0))
    assert e.value.frame == 1


def test_hand_without_depth():
    scene, _ = synth_scene(SynthConfig(n_frames=2), seed=0)
    f = scene.frames[0]
    D = f.depth.copy()
    D[f.hand_mask] = np.nan
    g = FrameObservation(0, D, f.hand_mask, f.object_mask, f.pose_init, f.intrinsics)
    with pytest.raises(NoValidHandDepth):
        afford.hand_center(g)


def test_trajectory_validation():
    with pytest.raises(DimensionMismatch):
        afford.Trajectory(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        afford.Trajectory(np.array([[0, 0, 0], [np.nan, 0, 0]]))


# contact / goal ------------------------------------------------------------------

def test_contact_points_on_blob(line_scene):
    scene, gt, res = line_scene
    c, g = afford.extract_contact_goal(scene, res, n_contact=32, n_goal=32)
    r = gt.hand_radius
    assert c.shape == (32, 3) and g.shape == (32, 3)
    assert np.all(np.linalg.norm(c - gt.hand_trajectory[0], axis=1) < r + 0.01)
    assert np.all(np.linalg.norm(g - gt.hand_trajectory[-1], axis=1) < r + 0.01)


def test_single_contact_is_centroid_nearest():
    rng = np.random.default_rng(0)
    P = rng.normal(scale=0.03, size=(200, 3))
    one = afford.voxel_downsample(P, 1)
    want = P[np.argmin(np.sum((P - P.mean(0)) ** 2, axis=1))]
    assert np.array_equal(one[0], want)


def test_identical_first_last_frames():
    scene, _ = synth_scene(SynthConfig(n_frames=3), seed=1)
    rep = repeat_frame(scene, 3)
    res = metric.RefinementResult([rep.frames[0].pose_init] * 3, np.full(3, 2.0), 0)
    c, g = afford.extract_contact_goal(rep, res)
    d = np.linalg.norm(c[:, None] - g[None], axis=-1).min(axis=1)
    assert np.all(d <= 0.01)


def test_downsample_properties():
    rng = np.random.default_rng(1)
    P = rng.uniform(-0.05, 0.05, size=(300, 3))
    a = afford.voxel_downsample(P, 40)
    b = afford.voxel_downsample(P.copy(), 40)
    assert np.array_equal(a, b)
    assert len({tuple(p) for p in a}) == 40
    # more requested than available
    assert afford.voxel_downsample(P[:5], 40).shape == (5, 3)
    # spreading: at most one point per voxel while voxels remain
    keys = {tuple(k) for k in np.floor(a / 0.01).astype(int)}
    assert len(keys) == 40


# heatmaps -----------------------------------------------------------------------

def test_heatmap_single_point():
    p = np.array([[0.1, -0.05, 1.0]])
    h = afford.fit_heatmap(p, K)
    u, v = project(p[0], K)
    r, c = np.unravel_index(np.argmax(h.grid), h.grid.shape)
    assert (c, r) == (round(u), round(v))
    assert h.grid[r, c] == 1.0
    assert np.sum(h.grid == 1.0) == 1
    assert h.goal_depth == 1.0


def test_heatmap_symmetry():
    # cx, cy at the image center of a 64x48 frame are (31.5, 23.5)
    Kc = Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
    p = np.array([[0.05, 0.02, 1.0], [-0.05, -0.02, 1.0]])
    h = afford.fit_heatmap(p, Kc)
    assert np.max(np.abs(h.grid - h.grid[::-1, ::-1])) < 1e-6


def test_heatmap_behind_camera():
    with pytest.raises(NoVisiblePoints):
        afford.fit_heatmap(np.array([[0, 0, -1.0], [0.1, 0, -2.0]]), K)


def test_heatmap_values_in_unit_interval():
    rng = np.random.default_rng(2)
    P = np.column_stack([rng.uniform(-0.1, 0.1, (20, 2)), rng.uniform(0.5, 1.5, 20)])
    g = afford.fit_heatmap(P, K).grid
    assert g.min() >= 0 and g.max() == 1.0


# losses -------------------------------------------------------------------------

def test_loss_identities():
    gt = (np.arange(48 * 64).reshape(48, 64) % 3 == 0).astype(float)
    L = afford.coarse_losses(afford.Heatmap(gt, 0.7), afford.Heatmap(gt, 0.7),
                             afford.Heatmap(gt), afford.Heatmap(gt))
    assert L.L_g == 0.0 and L.L_c == 0.0
    assert L.vector_field_omitted and L.L_v == 0.0
    zeros = np.zeros((4, 5))
    assert np.allclose(afford.bce(np.full((4, 5), 0.5), zeros), np.log(2), atol=1e-12)


def test_depth_term():
    gt = (np.arange(20).reshape(4, 5) % 2).astype(float)
    L = afford.coarse_losses(afford.Heatmap(gt, 1.2), afford.Heatmap(gt, 1.0),
                             afford.Heatmap(gt), afford.Heatmap(gt), lambda_d=1.0)
    assert L.L_g == pytest.approx(0.04, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        afford.coarse_losses(afford.Heatmap(np.zeros((2, 2))), afford.Heatmap(np.zeros((2, 3))),
                             afford.Heatmap(np.zeros((2, 2))), afford.Heatmap(np.zeros((2, 2))))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0.0, 1.0)),
       arrays(np.bool_, (3, 4)))
def test_bce_minimized_at_truth(pred, gt):
    y = gt.astype(float)
    at_truth = afford.bce(y, y)
    assert np.all(at_truth == 0.0)
    other = afford.bce(pred, y)
    assert np.all(other >= 0.0)
    differs = np.abs(pred - y) > 1e-6
    assert np.all(other[differs] > 0.0)


# lifting ------------------------------------------------------------------------

def test_lift_delta_at_principal_point():
    g = np.zeros(K.shape)
    g[24, 32] = 1.0
    P, s = afford.lift_heatmap_to_points(afford.Heatmap(g), 1.0, K)
    assert np.allclose(P, [[0.0, 0.0, 1.0]]) and s[0] == 1.0


def test_lift_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.08, 0.08), rng.uniform(0.6, 1.4)])
        h = afford.fit_heatmap(p[None], K)
        P, _ = afford.lift_heatmap_to_points(h, h.goal_depth, K)
        assert np.linalg.norm(project(P[0], K) - project(p, K)) <= 1.0


def test_lift_with_depth_map_and_order():
    g = np.zeros((4, 5))
    g[1, 1] = 0.9
    g[2, 3] = 0.9
    g[3, 4] = 0.95
    D = np.full((4, 5), 2.0)
    D[3, 4] = np.nan
    Ks = Intrinsics(10.0, 10.0, 2.0, 2.0, 5, 4)
    P, s = afford.lift_heatmap_to_points(afford.Heatmap(g), D, Ks, n=5)
    # invalid depth skipped, ties in row-major order
    assert np.allclose(s, [0.9, 0.9])
    assert np.allclose(P[0], [(1 - 2) / 10 * 2, (1 - 2) / 10 * 2, 2.0])
    with pytest.raises(DimensionMismatch):
        afford.lift_heatmap_to_points(afford.Heatmap(g), np.ones((3, 3)), Ks)


def test_lift_threshold():
    with pytest.raises(NothingAboveThreshold):
        afford.lift_heatmap_to_points(afford.Heatmap(np.ones(K.shape)), 1.0, K, threshold=1.1)


def test_sample_dict_round_trip():
    s = afford.AffordanceSample(np.ones((2, 3)), np.zeros((1, 3)),
                                afford.Trajectory(np.arange(12.0).reshape(4, 3)), "open")
    t = afford.AffordanceSample.from_dict(s.to_dict())
    assert np.array_equal(t.contact_points, s.contact_points)
    assert np.array_equal(t.trajectory.waypoints, s.trajectory.waypoints)
    assert t.instruction == "open"
