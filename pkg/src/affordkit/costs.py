"""Test-time guidance costs on trajectories and their analytic gradients.

All functions accept a single trajectory (H, 3) or a batch (..., H, 3) and
return values of shape (...) and gradients shaped like the input. The start
waypoint is never optimized, so its gradient row is always zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSegment, EmptyAgentPoints, EmptyGoals
from .tsdf import TsdfVolume


@dataclass
class GuidanceConfig:
    lambda_g: float = 1.0
    lambda_c: float = 1.0
    lambda_n: float = 0.1
    goals: np.ndarray | None = None
    agent_points: np.ndarray | None = None
    normal: np.ndarray | None = None
    volume: TsdfVolume | None = None

    def validate(self):
        if min(self.lambda_g, self.lambda_c, self.lambda_n) < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.lambda_g > 0 and (self.goals is None or len(self.goals) == 0):
            raise EmptyGoals("lambda_g > 0 needs at least one goal point")
        if self.lambda_c > 0:
            if self.agent_points is None or len(self.agent_points) == 0:
                raise EmptyAgentPoints("lambda_c > 0 needs agent points")
            if self.volume is None:
                raise ValueError("lambda_c > 0 needs a TSDF volume")
        if self.lambda_n > 0:
            if self.normal is None or abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
                raise ValueError("lambda_n > 0 needs a unit normal")
        return self

    def scaled(self, c: float) -> "GuidanceConfig":
        return GuidanceConfig(c * self.lambda_g, c * self.lambda_c, c * self.lambda_n,
                              self.goals, self.agent_points, self.normal, self.volume)


@dataclass
class CostReport:
    total: float
    goal: float
    collide: float
    normal: float
    gradient: np.ndarray

    def to_dict(self) -> dict:
        return {"total": float(self.total), "goal": float(self.goal),
                "collide": float(self.collide), "normal": float(self.normal)}


def cost_goal(traj, goals):
    """min over goals of the squared endpoint distance."""
    tau = np.asarray(traj, dtype=float)
    G = np.asarray(goals, dtype=float).reshape(-1, 3)
    if G.shape[0] == 0:
        raise EmptyGoals("no goal points")
    end = tau[..., -1, :]
    d2 = np.sum((end[..., None, :] - G) ** 2, axis=-1)
    n = np.argmin(d2, axis=-1)      # first index on ties
    J = np.take_along_axis(d2, n[..., None], axis=-1)[..., 0]
    grad = np.zeros_like(tau)
    grad[..., -1, :] = 2.0 * (end - G[n])
    return J, grad


def cost_collide(traj, agent_points, vol: TsdfVolume):
    """Mean penetration of the agent points carried along the trajectory."""
    tau = np.asarray(traj, dtype=float)
    P = np.asarray(agent_points, dtype=float).reshape(-1, 3)
    if P.shape[0] == 0:
        raise EmptyAgentPoints("no agent points")
    H = tau.shape[-2]
    Hp, Np = H - 1, P.shape[0]
    disp = tau[..., 1:, :] - tau[..., :1, :]                     # (..., H', 3)
    q = P + disp[..., :, None, :]                                 # (..., H', Np, 3)
    U, dU = vol.query_with_gradient(q)
    pen = U < 0
    J = 0.0 - np.sum(np.where(pen, U, 0.0), axis=(-2, -1)) / (Hp * Np)
    grad = np.zeros_like(tau)
    grad[..., 1:, :] = -np.sum(np.where(pen[..., None], dU, 0.0), axis=-2) / (Hp * Np)
    return J, grad


def cost_normal(traj, normal):
    """Mean over h > 1 of min_s || unit(tau_h - tau_1) - s n ||^2, sign per waypoint."""
    tau = np.asarray(traj, dtype=float)
    n = np.asarray(normal, dtype=float).reshape(3)
    v = tau[..., 1:, :] - tau[..., :1, :]
    L = np.linalg.norm(v, axis=-1)
    if np.any(L <= 1e-9):
        raise DegenerateSegment("a waypoint coincides with the start waypoint")
    d = v / L[..., None]
    dn = d @ n
    s = np.where(dn >= 0, 1.0, -1.0)     # s = +1 on ties
    r = d - s[..., None] * n
    Hp = v.shape[-2]
    J = np.sum(np.sum(r * r, axis=-1), axis=-1) / Hp
    # d/dv ||v/|v| - s n||^2 = (I - d d^T) 2 r / |v|
    gr = 2.0 * r
    gv = (gr - d * np.sum(d * gr, axis=-1, keepdims=True)) / L[..., None] / Hp
    grad = np.zeros_like(tau)
    grad[..., 1:, :] = gv
    return J, grad


def cost_total(traj, cfg: GuidanceConfig) -> CostReport:
    """Weighted cost for one trajectory; zero-weight terms are skipped."""
    tau = np.asarray(traj, dtype=float)
    batch = cost_total_batch(tau[None], cfg)
    return CostReport(float(batch["total"][0]), float(batch["goal"][0]),
                      float(batch["collide"][0]), float(batch["normal"][0]),
                      batch["gradient"][0])


def cost_total_batch(tau, cfg: GuidanceConfig) -> dict:
    tau = np.asarray(tau, dtype=float)
    shape = tau.shape[:-2]
    out = {"goal": np.zeros(shape), "collide": np.zeros(shape), "normal": np.zeros(shape)}
    grad = np.zeros_like(tau)
    total = np.zeros(shape)
    if cfg.lambda_g > 0:
        J, g = cost_goal(tau, cfg.goals)
        out["goal"] = J
        total = total + cfg.lambda_g * J
        grad += cfg.lambda_g * g
    if cfg.lambda_c > 0:
        J, g = cost_collide(tau, cfg.agent_points, cfg.volume)
        out["collide"] = J
        total = total + cfg.lambda_c * J
        grad += cfg.lambda_c * g
    if cfg.lambda_n > 0:
        J, g = cost_normal(tau, cfg.normal)
        out["normal"] = J
        total = total + cfg.lambda_n * J
        grad += cfg.lambda_n * g
    grad[..., 0, :] = 0.0
    out["total"] = total
    out["gradient"] = grad
    return out


def evaluate_terms(tau, cfg: GuidanceConfig) -> dict:
    """Raw (unweighted) goal/collide/normal values for reporting, whatever the weights.
    Terms whose inputs are missing are reported as NaN."""
    tau = np.asarray(tau, dtype=float)
    shape = tau.shape[:-2]
    out = {}
    out["goal"] = cost_goal(tau, cfg.goals)[0] if cfg.goals is not None and len(cfg.goals) \
        else np.full(shape, np.nan)
    out["collide"] = cost_collide(tau, cfg.agent_points, cfg.volume)[0] \
        if cfg.volume is not None and cfg.agent_points is not None else np.full(shape, np.nan)
    try:
        out["normal"] = cost_normal(tau, cfg.normal)[0] if cfg.normal is not None \
            else np.full(shape, np.nan)
    except DegenerateSegment:
        out["normal"] = np.full(shape, np.nan)
    return out


# ---------------------------------------------------------------------------
# agent point sets
# ---------------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def gripper_points(center, n: int = 32, kind: str = "box", size=(0.02, 0.08, 0.04),
                   object_points=None) -> np.ndarray:
    """Deterministic samples of a gripper primitive placed at ``center``.

    ``box``: n points on the surface of a box with full extents ``size`` (a
    closed parallel-jaw envelope). ``sphere``: n points on a sphere of radius
    ``size[0]``. Optional ``object_points`` (a carried object) are appended.
    """
    c = np.asarray(center, dtype=float).reshape(3)
    if kind == "sphere":
        pts = fibonacci_sphere(n) * float(np.atleast_1d(size)[0])
    elif kind == "box":
        half = np.asarray(size, dtype=float) / 2
        d = fibonacci_sphere(n)
        # radial projection of sphere samples onto the box surface
        t = 1.0 / np.max(np.abs(d) / half, axis=1)
        pts = d * t[:, None]
    else:
        raise ValueError(f"unknown gripper primitive {kind!r}")
    pts = pts + c
    if object_points is not None and len(object_points):
        pts = np.concatenate([pts, np.asarray(object_points, dtype=float).reshape(-1, 3)])
    return pts
