"""Analytic-vs-central-difference checks for every hand-derived gradient.

Each check draws seeded evaluation points, compares the analytic gradient with
central finite differences and returns the worst relative error
``|a - f| / max(|a|, |f|)`` (vector norms over the coordinates checked at one
point). Points are resampled when a difference stencil would straddle a TSDF
cell boundary, a penetration boundary or a min/sign tie.
"""
from __future__ import annotations

import numpy as np

from . import costs as _costs
from . import metric as _metric
from .errors import UnknownTarget
from .tsdf import TsdfVolume

TARGETS = ("eq2", "goal", "collide", "normal", "trilinear", "mlp")
TOLERANCE = 1e-4


def _rel(a, f) -> float:
    a = np.ravel(a)
    f = np.ravel(f)
    den = max(np.linalg.norm(a), np.linalg.norm(f))
    return 0.0 if den == 0 else float(np.linalg.norm(a - f) / den)


def check_eq2(seed: int = 0, n_points: int = 100, eps: float = 1e-6) -> float:
    from .ingest import SynthConfig, synth_scene
    rng = np.random.default_rng(seed)
    scene, _ = synth_scene(SynthConfig(n_frames=4, n_landmarks=40, width=160, height=120,
                                       focal=150.0, pose_noise_deg=1.0, pose_noise_m=0.01),
                           seed=seed)
    k = _metric.select_reference_frame(scene)
    poses = [f.pose_init for f in scene.frames]
    scales = np.full(len(poses), 2.0)
    corrs = _metric.associate(scene, k, poses, scales, stride=4)
    others = [i for i in range(len(poses)) if i != k]
    worst = 0.0
    for _ in range(n_points):
        base = {i: 1e-3 * rng.standard_normal(7) for i in others}
        p0, s0 = _metric.apply_increment(poses, scales, k, base)
        grads = _metric.frozen_gradient(corrs, p0, s0, k)
        i = others[int(rng.integers(len(others)))]
        fd = np.zeros(7)
        for j in range(7):
            d = np.zeros(7)
            d[j] = eps
            pp, sp = _metric.apply_increment(p0, s0, k, {i: d})
            pm, sm = _metric.apply_increment(p0, s0, k, {i: -d})
            fd[j] = (_metric.frozen_energy(corrs, pp, sp, k)
                     - _metric.frozen_energy(corrs, pm, sm, k)) / (2 * eps)
        worst = max(worst, _rel(grads[i], fd))
    return worst


def _fd(fn, tau, eps, rows):
    g = np.zeros_like(tau)
    for h in rows:
        for c in range(3):
            tp = tau.copy()
            tm = tau.copy()
            tp[h, c] += eps
            tm[h, c] -= eps
            g[h, c] = (fn(tp) - fn(tm)) / (2 * eps)
    return g


def check_goal(seed: int = 0, n_points: int = 100, eps: float = 1e-6) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        tau = rng.normal(size=(8, 3))
        goals = rng.normal(size=(5, 3))
        d2 = np.sort(np.sum((goals - tau[-1]) ** 2, axis=1))
        if d2[1] - d2[0] < 1e-3:
            continue
        J, g = _costs.cost_goal(tau, goals)
        fd = _fd(lambda t: float(_costs.cost_goal(t, goals)[0]), tau, eps, range(8))
        worst = max(worst, _rel(g, fd))
    return worst


def smooth_volume(voxel: float = 0.02) -> TsdfVolume:
    """Sphere SDF with a truncation wide enough that no voxel is clamped."""
    return TsdfVolume.from_sdf(lambda c: np.linalg.norm(c, axis=1) - 0.25,
                               [-0.5, -0.5, -0.5], [0.5, 0.5, 0.5], voxel, truncation=1.0)


def _safe_queries(vol, q, eps):
    g = (q - vol.origin) / vol.voxel_size
    frac = g - np.floor(g)
    e = eps / vol.voxel_size
    away = np.all((frac > 2 * e) & (frac < 1 - 2 * e), axis=-1)
    U = vol.query(q)
    return away & (np.abs(U) > 1e-4)


def check_collide(seed: int = 0, n_points: int = 100, eps: float = 1e-6) -> float:
    rng = np.random.default_rng(seed)
    vol = smooth_volume()
    worst = 0.0
    done = 0
    while done < n_points:
        H = 6
        tau = np.cumsum(rng.normal(scale=0.05, size=(H, 3)), axis=0) + rng.uniform(-0.2, 0.2, 3)
        P = tau[0] + rng.normal(scale=0.03, size=(4, 3))
        q = P + (tau[1:] - tau[:1])[:, None, :]
        if not np.all(_safe_queries(vol, q, eps)):
            continue
        J, g = _costs.cost_collide(tau, P, vol)
        fd = _fd(lambda t: float(_costs.cost_collide(t, P, vol)[0]), tau, eps, range(1, H))
        # the start row is zero by rule; compare the optimized rows only
        worst = max(worst, _rel(g[1:], fd[1:]))
        done += 1
    return worst


def check_normal(seed: int = 0, n_points: int = 100, eps: float = 1e-6) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_points:
        tau = rng.normal(size=(8, 3))
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        v = tau[1:] - tau[:1]
        if np.min(np.abs(v @ n) / np.linalg.norm(v, axis=1)) < 1e-3:
            continue
        J, g = _costs.cost_normal(tau, n)
        fd = _fd(lambda t: float(_costs.cost_normal(t, n)[0]), tau, eps, range(1, 8))
        worst = max(worst, _rel(g[1:], fd[1:]))
        done += 1
    return worst


def check_trilinear(seed: int = 0, n_points: int = 100) -> float:
    rng = np.random.default_rng(seed)
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.05, (6, 5, 7), 0.1,
                     rng.uniform(-1, 1, (6, 5, 7)), np.ones((6, 5, 7)))
    eps = vol.voxel_size / 100
    worst = 0.0
    done = 0
    while done < n_points:
        p = vol.origin + rng.uniform(0, 1, 3) * (np.array(vol.dims) - 1) * vol.voxel_size
        if not _safe_queries(vol, p[None], eps)[0]:
            continue
        g = vol.query_gradient(p)
        fd = np.array([(vol.query(p + eps * e) - vol.query(p - eps * e)) / (2 * eps)
                       for e in np.eye(3)])
        worst = max(worst, _rel(g, fd))
        done += 1
    return worst


def check_mlp(seed: int = 0, n_points: int = 100, eps: float = 1e-6) -> float:
    """Parameter gradients of the x0 loss and the input vjp, for a plain
    network and for one with data-normalized outputs and the weighted loss."""
    from .denoiser import DenoiserInput, MlpDenoiser
    rng = np.random.default_rng(seed)
    nets = []
    for normalize in (False, True):
        d = MlpDenoiser.create(horizon=4, cond_dim=6, widths=(8, 8), seed=seed, normalize=normalize)
        for p in d.params:
            p += 0.1 * rng.standard_normal(p.shape)
        if normalize:
            d.set_statistics(rng.normal(size=(10, 4, 3)))
        nets.append(d)
    worst = 0.0
    for it in range(n_points):
        d = nets[it % 2]
        weighted = d.normalize
        inp = DenoiserInput(rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 1)),
                            rng.integers(1, 100, size=3), rng.normal(size=(3, 6)))
        target = rng.normal(size=(3, 4, 3))
        _, grads = d.loss_and_grads(inp, target, weighted)
        # a random subset of parameters
        a, f = [], []
        for _ in range(12):
            pi = int(rng.integers(len(d.params)))
            idx = tuple(int(rng.integers(s)) for s in d.params[pi].shape)
            old = d.params[pi][idx]
            d.params[pi][idx] = old + eps
            lp = d.loss_and_grads(inp, target, weighted)[0]
            d.params[pi][idx] = old - eps
            lm = d.loss_and_grads(inp, target, weighted)[0]
            d.params[pi][idx] = old
            a.append(grads[pi][idx])
            f.append((lp - lm) / (2 * eps))
        worst = max(worst, _rel(a, f))
        # input sensitivity through vjp
        cot = rng.normal(size=(3, 4, 3))
        g_tau, g_feat = d.vjp(inp.tau_k, inp.feat, inp.k, inp.cond, cot)
        h, c = int(rng.integers(4)), int(rng.integers(3))
        tp = inp.tau_k.copy()
        tm = inp.tau_k.copy()
        tp[:, h, c] += eps
        tm[:, h, c] -= eps
        fp = np.sum(cot * d.predict(tp, inp.feat, inp.k, inp.cond))
        fm = np.sum(cot * d.predict(tm, inp.feat, inp.k, inp.cond))
        worst = max(worst, _rel(g_tau[:, h, c].sum(), (fp - fm) / (2 * eps)))
    return worst


CHECKS = {"eq2": check_eq2, "goal": check_goal, "collide": check_collide,
          "normal": check_normal, "trilinear": check_trilinear, "mlp": check_mlp}


def run_gradcheck(targets, seed: int = 0, n_points: int = 100) -> dict:
    targets = list(targets)
    unknown = [t for t in targets if t not in CHECKS]
    if unknown:
        raise UnknownTarget(f"unknown gradcheck target(s): {', '.join(unknown)}")
    return {t: CHECKS[t](seed, n_points) for t in targets}
