"""Metric scale recovery and depth-consistent pose/scale refinement.

The global scale minimizes the masked squared difference between predicted
depth at landmark pixels and ``s * landmark depth``; it is quadratic in ``s``
and solved in closed form.

Refinement aligns every frame ``i`` to a reference frame ``k`` by minimizing

    E = sum_{i != k} sum_{u_i} w * || s_i^-1 T_CkCi X_i(u_i) - s_k^-1 X_k(u_k) ||^2

over left-multiplied twist increments of ``T_WCi`` and log-scales ``log s_i``.
``u_k`` is the projective correspondence of ``u_i``. Within an outer iteration
the pairing is frozen: each source pixel keeps its 2x2 depth stencil in frame
``k`` and the target slides along that stencil's bilinear inverse-depth model
as the warped point moves. A fixed target point would sit on the warped point's
own ray and give no lateral signal. Pairings are recomputed between iterations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (DivergedOptimization, EmptyOverlap, NonPositiveScale,
                     NoValidObservations)
from .geom import (Intrinsics, Pose, backproject_points, nearest_pixel, pixel_grid,
                   project_points, sample_depth, se3_exp, se3_log)
from .ingest import SceneBundle

log = logging.getLogger(__name__)


@dataclass
class ScaleSolution:
    s_g: float
    residual: float
    inlier_count: int

    def to_dict(self) -> dict:
        return {"s_g": self.s_g, "residual": self.residual, "inlier_count": self.inlier_count}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleSolution":
        return cls(float(d["s_g"]), float(d["residual"]), int(d["inlier_count"]))


@dataclass
class RefinementResult:
    poses: list
    scales: np.ndarray
    reference_index: int
    energy_trace: list = field(default_factory=list)
    n_correspondences: int = 0

    def to_dict(self, frame_indices=None) -> dict:
        idx = frame_indices if frame_indices is not None else list(range(len(self.poses)))
        return {
            "reference_index": self.reference_index,
            "frames": [{"index": int(i), "pose_wc": p.to_dict(), "scale": float(s)}
                       for i, p, s in zip(idx, self.poses, self.scales)],
            "energy_trace": [float(e) for e in self.energy_trace],
            "n_correspondences": self.n_correspondences,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefinementResult":
        frames = sorted(d["frames"], key=lambda f: f["index"])
        return cls([Pose.from_dict(f["pose_wc"]) for f in frames],
                   np.array([float(f["scale"]) for f in frames]),
                   int(d["reference_index"]), [float(e) for e in d.get("energy_trace", [])],
                   int(d.get("n_correspondences", 0)))


# ---------------------------------------------------------------------------
# global scale
# ---------------------------------------------------------------------------

def _scale_terms(scene: SceneBundle):
    """Collect (predicted depth, landmark depth) pairs on static, valid pixels."""
    K = scene.intrinsics
    d_hat, d_lm = [], []
    for lm in scene.landmarks:
        for fi, u, v in lm.observations:
            pos = scene.position_of(fi)
            frame = scene.frames[pos]
            d = frame.pose_init.inverse().apply(lm.position)[2]
            uv = np.array([u, v])
            r, c, ok = nearest_pixel(uv, K)
            if not ok or not scene.static_masks[pos][r, c] or d <= 0:
                continue
            z, _, _ = sample_depth(frame.depth, uv)
            if not np.isfinite(z):
                continue
            d_hat.append(float(z))
            d_lm.append(float(d))
    return np.asarray(d_hat), np.asarray(d_lm)


def solve_global_scale(scene: SceneBundle) -> ScaleSolution:
    d_hat, d = _scale_terms(scene)
    if d.size == 0:
        raise NoValidObservations("no landmark observation on a static pixel with valid depth")
    den = float(np.dot(d, d))
    s = float(np.dot(d_hat, d)) / den if den > 0 else 0.0
    if not s > 0:
        raise NonPositiveScale(f"closed-form scale {s} is not positive")
    residual = float(np.mean((d_hat - s * d) ** 2))
    return ScaleSolution(s, residual, int(d.size))


def scale_objective(scene: SceneBundle, s: float) -> float:
    """Sum of squared depth residuals ``d_hat - s * d`` over valid observations."""
    d_hat, d = _scale_terms(scene)
    return float(np.sum((d_hat - s * d) ** 2))


def select_reference_frame(scene: SceneBundle) -> int:
    """Frame (list position) observing the most landmarks shared with another frame."""
    counts = np.zeros(len(scene.frames), dtype=int)
    for lm in scene.landmarks:
        frames = {scene.position_of(o[0]) for o in lm.observations}
        if len(frames) < 2:
            continue
        for p in frames:
            counts[p] += 1
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------

def _warp(scene, i, k, uv_i, depth_i, scales, poses, occlusion_tol):
    """Warp pixels of frame i into frame k. Returns (uv_k, z_k, valid, X_i)."""
    K = scene.intrinsics
    X = backproject_points(uv_i, depth_i, K)
    T_ki = poses[k].inverse() @ poses[i]
    Y = T_ki.apply(X / scales[i])
    uv_k, front = project_points(Y, K)
    z_warp = scales[k] * Y[:, 2]
    z_k, zmin, zmax = sample_depth(scene.frames[k].depth, uv_k, scene.static_masks[k])
    with np.errstate(invalid="ignore"):
        valid = front & np.isfinite(z_k)
        valid &= np.abs(zmin - z_warp) <= occlusion_tol * z_warp
        valid &= np.abs(zmax - z_warp) <= occlusion_tol * z_warp
    return uv_k, z_k, valid, X


def projective_correspondence(scene: SceneBundle, i: int, k: int, u_i, scales, poses,
                              occlusion_tol: float = 0.1):
    """Pixel in frame ``k`` seeing the point back-projected from integer pixel ``u_i``
    of frame ``i``; ``None`` if it leaves the image, falls behind the camera,
    lands on invalid depth or fails the occlusion test."""
    uv = np.asarray(u_i, dtype=float).reshape(1, 2)
    r, c, ok = nearest_pixel(uv, scene.intrinsics)
    if not ok[0]:
        return None
    d = scene.frames[i].depth[r[0], c[0]]
    if not (np.isfinite(d) and d > 0):
        return None
    uv_k, _, valid, _ = _warp(scene, i, k, uv, np.array([d]), scales, poses, occlusion_tol)
    return uv_k[0] if valid[0] else None


@dataclass
class FrameCorrespondences:
    """Frozen pairing between source pixels of frame ``i`` and interpolation
    stencils of the reference frame.

    The target for each source point is re-projected on every evaluation, but
    its depth comes from the frozen 2x2 stencil's bilinear inverse-depth model
    (extrapolated if the projection leaves the cell). Exact on planes.
    """
    frame: int
    X: np.ndarray        # (N, 3) back-projected source points, meters, camera i
    cell: np.ndarray     # (N, 2) stencil origin (col, row) in the reference frame
    inv: np.ndarray      # (N, 4) stencil inverse depths [i00, i01, i10, i11]
    weight: np.ndarray   # (N,)
    K: Intrinsics = None


def associate(scene: SceneBundle, k: int, poses, scales, stride: int = 4,
              occlusion_tol: float = 0.1, huber_delta: float | None = None):
    K = scene.intrinsics
    uv_all, rr, cc = pixel_grid(K, stride)
    Dk = scene.frames[k].depth
    out = []
    for i, frame in enumerate(scene.frames):
        if i == k:
            continue
        d = frame.depth[rr, cc]
        sel = scene.static_masks[i][rr, cc] & np.isfinite(d) & (d > 0)
        uv_i = uv_all[sel]
        uv_k, z_k, valid, X = _warp(scene, i, k, uv_i, d[sel], scales, poses, occlusion_tol)
        uv_k = uv_k[valid]
        c0 = np.minimum(np.floor(uv_k[:, 0]).astype(int), K.width - 2)
        r0 = np.minimum(np.floor(uv_k[:, 1]).astype(int), K.height - 2)
        inv = 1.0 / np.stack([Dk[r0, c0], Dk[r0, c0 + 1], Dk[r0 + 1, c0], Dk[r0 + 1, c0 + 1]], axis=-1)
        corr = FrameCorrespondences(i, X[valid], np.stack([c0, r0], axis=-1).astype(float), inv,
                                    np.ones(int(valid.sum())), K)
        if huber_delta is not None and corr.weight.size:
            r = _residuals(corr, poses[i], scales[i], poses[k].inverse(), scales[k])[0]
            n = np.linalg.norm(r, axis=1)
            corr.weight = np.where(n <= huber_delta, 1.0, huber_delta / np.maximum(n, 1e-300))
        out.append(corr)
    return out


# ---------------------------------------------------------------------------
# energy and gradient with frozen correspondences
# ---------------------------------------------------------------------------

def _residuals(corr: FrameCorrespondences, T_i: Pose, s_i: float, A: Pose, s_k: float,
               with_jacobian: bool = False):
    """Residuals r = Y - X_k(pi(Y)) / s_k in reference-camera SfM units.

    With ``with_jacobian`` also returns P (world points) and dr/dY (N, 3, 3).
    """
    K = corr.K
    P = T_i.apply(corr.X / s_i)
    Y = A.apply(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        iz = 1.0 / Y[:, 2]
        u = K.fx * Y[:, 0] * iz + K.cx
        v = K.fy * Y[:, 1] * iz + K.cy
        fu = u - corr.cell[:, 0]
        fv = v - corr.cell[:, 1]
        i00, i01, i10, i11 = corr.inv.T
        inv = (i00 * (1 - fu) * (1 - fv) + i01 * fu * (1 - fv)
               + i10 * (1 - fu) * fv + i11 * fu * fv)
        z = 1.0 / inv
        ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
        r = Y - (z / s_k)[:, None] * ray
    bad = ~(Y[:, 2] > 1e-9) | ~(inv > 0)
    if np.any(bad):
        r = np.where(bad[:, None], np.inf, r)
    if not with_jacobian:
        return r, P
    di_du = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    di_dv = (1 - fu) * (i10 - i00) + fu * (i11 - i01)
    dz_du = -z * z * di_du
    dz_dv = -z * z * di_dv
    dX_du = (dz_du[:, None] * ray + z[:, None] * np.array([1.0 / K.fx, 0.0, 0.0])) / s_k
    dX_dv = (dz_dv[:, None] * ray + z[:, None] * np.array([0.0, 1.0 / K.fy, 0.0])) / s_k
    n = Y.shape[0]
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = K.fx * iz
    dpi[:, 0, 2] = -K.fx * Y[:, 0] * iz * iz
    dpi[:, 1, 1] = K.fy * iz
    dpi[:, 1, 2] = -K.fy * Y[:, 1] * iz * iz
    dX_dY = np.einsum("na,nb->nab", dX_du, dpi[:, 0]) + np.einsum("na,nb->nab", dX_dv, dpi[:, 1])
    M = np.eye(3)[None] - dX_dY
    return r, P, M


def frozen_energy(corrs, poses, scales, k: int) -> float:
    A = poses[k].inverse()
    E = 0.0
    for c in corrs:
        r, _ = _residuals(c, poses[c.frame], scales[c.frame], A, scales[k])
        E += float(np.sum(c.weight * np.einsum("ij,ij->i", r, r)))
    return E if np.isfinite(E) else np.inf


def frozen_gradient(corrs, poses, scales, k: int, with_hessian: bool = False):
    """Gradient of the frozen energy w.r.t. a left twist increment (6) and log-scale
    increment (1) of every non-reference frame, evaluated at zero increment.

    Returns ``{frame: grad(7)}`` and, optionally, Gauss-Newton ``{frame: J^T W J}``.
    """
    A = poses[k].inverse()
    grads, hess = {}, {}
    for c in corrs:
        T_i = poses[c.frame]
        r, P, M = _residuals(c, T_i, scales[c.frame], A, scales[k], with_jacobian=True)
        n = P.shape[0]
        # dY/dtheta = R_A [-[P]x | I | -(P - t_i)]
        G = np.zeros((n, 3, 7))
        G[:, 0, 1], G[:, 0, 2] = P[:, 2], -P[:, 1]
        G[:, 1, 0], G[:, 1, 2] = -P[:, 2], P[:, 0]
        G[:, 2, 0], G[:, 2, 1] = P[:, 1], -P[:, 0]
        G[:, :, 3:6] = np.eye(3)
        G[:, :, 6] = -(P - T_i.t)
        J = np.einsum("nab,bc,ncd->nad", M, A.R, G)
        grads[c.frame] = 2.0 * np.einsum("n,na,nad->d", c.weight, r, J)
        if with_hessian:
            hess[c.frame] = 2.0 * np.einsum("n,nai,naj->ij", c.weight, J, J)
    if with_hessian:
        return grads, hess
    return grads


def apply_increment(poses, scales, k: int, step: dict):
    """Left-multiply twist increments and scale log-increments; frame k untouched."""
    new_poses = list(poses)
    new_scales = np.array(scales, dtype=float)
    for i, d in step.items():
        if i == k:
            continue
        new_poses[i] = se3_exp(d[:6]) @ poses[i]
        new_scales[i] = scales[i] * np.exp(d[6])
    return new_poses, new_scales


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class RefineOptions:
    max_outer: int = 60
    max_inner: int = 25
    step: float = 1.0
    tol: float = 1e-8
    stride: int = 4
    occlusion_tol: float = 0.1
    max_halvings: int = 30
    recompute_correspondences: bool = True
    huber_delta: float | None = None
    solver: str = "gauss-newton"     # "gauss-newton" | "gd"
    damping: float = 1e-6


def _direction(corrs, poses, scales, k, opts: RefineOptions, n_total: int):
    if opts.solver == "gd":
        grads = frozen_gradient(corrs, poses, scales, k)
        # gradient of the mean energy so the step size is independent of pixel count
        return {i: -g / max(n_total, 1) for i, g in grads.items()}, grads
    grads, hess = frozen_gradient(corrs, poses, scales, k, with_hessian=True)
    out = {}
    for i, g in grads.items():
        H = hess[i]
        H = H + opts.damping * (np.trace(H) / 7.0 + 1e-12) * np.eye(7)
        out[i] = -np.linalg.solve(H, g)
    return out, grads


def _inner_descent(corrs, poses, scales, k, opts: RefineOptions, first_call: bool):
    """Monotone descent on the frozen energy. Returns (poses, scales, energies)."""
    n_total = sum(c.X.shape[0] for c in corrs)
    E = frozen_energy(corrs, poses, scales, k)
    energies = [E]
    alpha = opts.step
    for it in range(opts.max_inner):
        direction, grads = _direction(corrs, poses, scales, k, opts, n_total)
        gnorm = np.sqrt(sum(float(g @ g) for g in grads.values()))
        if gnorm == 0.0 or E == 0.0:
            break
        a = alpha
        for _ in range(opts.max_halvings):
            cand_p, cand_s = apply_increment(poses, scales, k, {i: a * d for i, d in direction.items()})
            E_new = frozen_energy(corrs, cand_p, cand_s, k)
            if np.isfinite(E_new) and E_new <= E:
                break
            a *= 0.5
        else:
            if first_call and it == 0 and E > 1e-20 * max(n_total, 1):
                raise DivergedOptimization(
                    f"energy did not decrease after {opts.max_halvings} step halvings")
            break
        if not np.isfinite(E_new):
            raise DivergedOptimization("energy became non-finite")
        rel = (E - E_new) / max(E, 1e-300)
        poses, scales, E = cand_p, cand_s, E_new
        energies.append(E)
        if opts.solver == "gd":
            alpha = min(opts.step, 2.0 * a)
        if rel < opts.tol:
            break
    return poses, scales, energies


def refine_poses_scales(scene: SceneBundle, s_g: float, options: RefineOptions | None = None,
                        reference: int | None = None) -> RefinementResult:
    opts = options or RefineOptions()
    k = select_reference_frame(scene) if reference is None else reference
    poses = [f.pose_init for f in scene.frames]
    scales = np.full(len(poses), float(s_g))
    scales[k] = s_g

    def assoc(p, s):
        return associate(scene, k, p, s, opts.stride, opts.occlusion_tol, opts.huber_delta)

    corrs = assoc(poses, scales)
    n_corr = sum(c.X.shape[0] for c in corrs)
    if n_corr == 0:
        raise EmptyOverlap("no valid correspondences between any frame and the reference")
    E = frozen_energy(corrs, poses, scales, k)
    trace = [E]
    log.debug("refine: reference %d, %d correspondences, E0 = %.6g", k, n_corr, E)

    if not opts.recompute_correspondences:
        poses, scales, energies = _inner_descent(corrs, poses, scales, k, opts, True)
        trace.extend(energies[1:])
        return RefinementResult(poses, scales, k, trace, n_corr)

    for outer in range(opts.max_outer):
        new_p, new_s, _ = _inner_descent(corrs, poses, scales, k, opts, outer == 0)
        # accept the outer step only if the re-associated energy does not increase;
        # otherwise shrink the increment along the same tangent direction
        incr = {i: np.concatenate([_log_increment(new_p[i], poses[i]),
                                   [np.log(new_s[i] / scales[i])]])
                for i in range(len(poses)) if i != k}
        a = 1.0
        accepted = False
        for _ in range(opts.max_halvings):
            cand_p, cand_s = apply_increment(poses, scales, k, {i: a * d for i, d in incr.items()})
            cand_corrs = assoc(cand_p, cand_s)
            if sum(c.X.shape[0] for c in cand_corrs) == 0:
                a *= 0.5
                continue
            E_new = frozen_energy(cand_corrs, cand_p, cand_s, k)
            if E_new <= E:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        rel = (E - E_new) / max(E, 1e-300)
        poses, scales, corrs, E = cand_p, cand_s, cand_corrs, E_new
        n_corr = sum(c.X.shape[0] for c in corrs)
        trace.append(E)
        if rel < opts.tol:
            break
    return RefinementResult(poses, scales, k, trace, n_corr)


def _log_increment(T_new: Pose, T_old: Pose) -> np.ndarray:
    return se3_log(T_new @ T_old.inverse())
