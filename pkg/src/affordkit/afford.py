"""Affordance labels from a metric-calibrated scene.

Trajectory = per-frame hand centers expressed in the first camera's frame
(meters). Contact/goal points are downsampled hand points of the first/last
frame. Heatmaps are equal-weight isotropic Gaussian blobs around projected
points, and the coarse losses are per-pixel BCE plus a goal-depth term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, EmptyHandMask, NothingAboveThreshold,
                     NoValidHandDepth, NoVisiblePoints)
from .geom import Intrinsics, backproject_points, project_points
from .ingest import FrameObservation, SceneBundle

BCE_EPS = 1e-7


@dataclass
class Trajectory:
    waypoints: np.ndarray   # (H, 3) meters, frame-0 camera

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] < 2:
            raise DimensionMismatch(f"trajectory must be Hx3 with H >= 2, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("trajectory has non-finite waypoints")
        self.waypoints = w

    def __len__(self):
        return self.waypoints.shape[0]


@dataclass
class AffordanceSample:
    contact_points: np.ndarray
    goal_points: np.ndarray
    trajectory: Trajectory
    instruction: str = ""

    def to_dict(self) -> dict:
        return {"instruction": self.instruction,
                "contact": np.asarray(self.contact_points).tolist(),
                "goal": np.asarray(self.goal_points).tolist(),
                "trajectory": self.trajectory.waypoints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffordanceSample":
        return cls(np.asarray(d["contact"], dtype=float).reshape(-1, 3),
                   np.asarray(d["goal"], dtype=float).reshape(-1, 3),
                   Trajectory(np.asarray(d["trajectory"], dtype=float)),
                   str(d.get("instruction", "")))


@dataclass
class Heatmap:
    grid: np.ndarray                 # (rows, cols) probabilities
    goal_depth: float | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)


# ---------------------------------------------------------------------------
# trajectory / contact / goal
# ---------------------------------------------------------------------------

def _hand_pixels(frame: FrameObservation):
    rr, cc = np.nonzero(frame.hand_mask)
    if rr.size == 0:
        raise EmptyHandMask(frame.index)
    d = frame.depth[rr, cc]
    ok = np.isfinite(d) & (d > 0)
    return rr, cc, d, ok


def hand_center(frame: FrameObservation) -> np.ndarray:
    """Hand center in camera coordinates (meters): centroid pixel at median depth."""
    rr, cc, d, ok = _hand_pixels(frame)
    if not np.any(ok):
        raise NoValidHandDepth(frame.index)
    uv = np.array([[cc.mean(), rr.mean()]])
    return backproject_points(uv, np.array([np.median(d[ok])]), frame.intrinsics)[0]


def _to_frame0(points_cam, i, poses, scales):
    """Metric camera-i points -> metric frame-0 camera points: s_0 T_C0Ci (X / s_i)."""
    T = poses[0].inverse() @ poses[i]
    return scales[0] * T.apply(np.asarray(points_cam) / scales[i])


def extract_trajectory(scene: SceneBundle, refined) -> Trajectory:
    pts = []
    for i, frame in enumerate(scene.frames):
        X = hand_center(frame)
        pts.append(_to_frame0(X, i, refined.poses, refined.scales))
    return Trajectory(np.array(pts))


def voxel_downsample(points: np.ndarray, n: int, voxel: float = 0.01) -> np.ndarray:
    """Deterministic uniform downsampling to exactly ``min(n, len(points))`` points.

    One representative per occupied voxel (nearest to the voxel mean; the voxel
    holding the overall centroid-nearest point uses that point). Representatives
    are ordered by farthest-point sampling seeded at the centroid-nearest point.
    If more points than voxels are requested, the remaining points of each voxel
    are appended round-robin, closest to their voxel mean first.
    """
    P = np.asarray(points, dtype=float)
    n = min(int(n), P.shape[0])
    if n <= 0:
        return np.zeros((0, 3))
    first = int(np.argmin(np.sum((P - P.mean(0)) ** 2, axis=1)))
    keys = np.floor(P / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cells = []
    for c in range(inv.max() + 1):
        idx = np.nonzero(inv == c)[0]
        m = P[idx].mean(0)
        order = idx[np.argsort(np.sum((P[idx] - m) ** 2, axis=1), kind="stable")]
        if first in idx:
            order = np.concatenate([[first], order[order != first]])
        cells.append(order)
    reps = np.array([c[0] for c in cells])
    # farthest-point ordering of the representatives
    start = int(np.nonzero(reps == first)[0][0])
    chosen = [start]
    dist = np.sum((P[reps] - P[reps[start]]) ** 2, axis=1)
    while len(chosen) < min(n, len(reps)):
        j = int(np.argmax(dist))
        chosen.append(j)
        dist = np.minimum(dist, np.sum((P[reps] - P[reps[j]]) ** 2, axis=1))
    out = [reps[j] for j in chosen]
    depth = 1
    while len(out) < n:
        for j in chosen:
            if depth < len(cells[j]) and len(out) < n:
                out.append(cells[j][depth])
        depth += 1
    return P[np.array(out)]


def _hand_points(scene, i, poses, scales):
    frame = scene.frames[i]
    rr, cc, d, ok = _hand_pixels(frame)
    if not np.any(ok):
        raise NoValidHandDepth(frame.index)
    uv = np.stack([cc[ok], rr[ok]], axis=-1).astype(float)
    X = backproject_points(uv, d[ok], frame.intrinsics)
    return _to_frame0(X, i, poses, scales)


def extract_contact_goal(scene: SceneBundle, refined, traj: Trajectory | None = None,
                         n_contact: int = 32, n_goal: int = 32, voxel: float = 0.01):
    """Contact points from the first frame's hand pixels, goal points from the
    last frame's, both in frame-0 camera coordinates."""
    c = _hand_points(scene, 0, refined.poses, refined.scales)
    g = _hand_points(scene, len(scene.frames) - 1, refined.poses, refined.scales)
    return voxel_downsample(c, n_contact, voxel), voxel_downsample(g, n_goal, voxel)


# ---------------------------------------------------------------------------
# heatmaps and coarse losses
# ---------------------------------------------------------------------------

def fit_heatmap(points, frame: FrameObservation | Intrinsics, sigma_px: float = 8.0) -> Heatmap:
    """Gaussian-blob heatmap of ``points`` (camera coordinates of ``frame``)."""
    K = frame.intrinsics if isinstance(frame, FrameObservation) else frame
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    uv, front = project_points(P, K)
    inside = front & (uv[:, 0] >= -0.5) & (uv[:, 0] < K.width - 0.5) \
        & (uv[:, 1] >= -0.5) & (uv[:, 1] < K.height - 0.5)
    if not np.any(inside):
        raise NoVisiblePoints("no point projects inside the image")
    uv = uv[inside]
    rows, cols = K.shape
    r = np.arange(rows, dtype=float)
    c = np.arange(cols, dtype=float)
    # separable evaluation, one blob per point
    gr = np.exp(-(r[None, :] - uv[:, 1:2]) ** 2 / (2 * sigma_px ** 2))
    gc = np.exp(-(c[None, :] - uv[:, 0:1]) ** 2 / (2 * sigma_px ** 2))
    grid = np.einsum("nr,nc->rc", gr, gc)
    grid /= grid.max()
    return Heatmap(grid, float(np.median(P[inside, 2])))


def bce(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel binary cross-entropy; log arguments clamped at 1e-7."""
    p = np.asarray(pred, dtype=float)
    y = np.asarray(gt, dtype=float)
    return -(y * np.log(np.maximum(p, BCE_EPS)) + (1 - y) * np.log(np.maximum(1 - p, BCE_EPS)))


@dataclass
class CoarseLosses:
    L_g: float
    L_c: float
    bce_goal: float
    bce_contact: float
    depth_term: float
    L_v: float = 0.0
    vector_field_omitted: bool = field(default=True)


def coarse_losses(pred_goal: Heatmap, gt_goal: Heatmap, pred_contact: Heatmap,
                  gt_contact: Heatmap, lambda_d: float = 1.0) -> CoarseLosses:
    if pred_goal.grid.shape != gt_goal.grid.shape or pred_contact.grid.shape != gt_contact.grid.shape:
        raise DimensionMismatch("prediction and label heatmaps differ in shape")
    bg = float(np.mean(bce(pred_goal.grid, gt_goal.grid)))
    bc = float(np.mean(bce(pred_contact.grid, gt_contact.grid)))
    dp = pred_goal.goal_depth if pred_goal.goal_depth is not None else 0.0
    dg = gt_goal.goal_depth if gt_goal.goal_depth is not None else 0.0
    dterm = float((dp - dg) ** 2)
    return CoarseLosses(bg + lambda_d * dterm, bc, bg, bc, dterm)


def lift_heatmap_to_points(h: Heatmap, depth_source, K: Intrinsics, n: int = 1,
                           threshold: float = 0.5):
    """Back-project the top-``n`` heatmap pixels (value >= threshold, valid depth).

    ``depth_source`` is a depth map (contact variant) or a scalar goal depth.
    Ties are broken in row-major order. Returns (points (N,3), scores (N,)).
    """
    grid = h.grid
    vals = grid.ravel()
    if np.ndim(depth_source) == 0:
        dvals = np.full(vals.shape, float(depth_source))
    else:
        D = np.asarray(depth_source, dtype=float)
        if D.shape != grid.shape:
            raise DimensionMismatch(f"depth {D.shape} vs heatmap {grid.shape}")
        dvals = D.ravel()
    with np.errstate(invalid="ignore"):
        ok = (vals >= threshold) & np.isfinite(dvals) & (dvals > 0)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        raise NothingAboveThreshold(f"no pixel with value >= {threshold} and valid depth")
    idx = idx[np.argsort(-vals[idx], kind="stable")][:n]
    rows, cols = np.divmod(idx, grid.shape[1])
    uv = np.stack([cols, rows], axis=-1).astype(float)
    return backproject_points(uv, dvals[idx], K), vals[idx]
