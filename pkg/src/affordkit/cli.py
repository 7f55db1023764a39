"""Command-line entry point: ``affordkit <command> [flags]``.

Exit codes: 0 success, 1 domain error (any AffordkitError), 2 usage error.
Every output file is written to a temporary sibling and renamed into place.
All trajectories and the TSDF volume live in the first frame's camera
coordinates, in meters.
"""
from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("AFFORDKIT_THREADS", "0")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import afford, costs, denoiser, diffusion, gradcheck, ingest, metric, tsdf
from .errors import (AffordkitError, DegenerateNormal, DimensionMismatch, EmptyDataset,
                     IoError, LowQualityLabel, ManifestParse, MissingFile)
from .geom import Pose

log = logging.getLogger("affordkit")


# ---------------------------------------------------------------------------
# io helpers
# ---------------------------------------------------------------------------

def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def write_json(path, obj, indent=None):
    _atomic_write(path, (json.dumps(obj, indent=indent) + "\n").encode())


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestParse(f"{path}: {e}") from e


def export_ply(points, trajectories=None, path=None, ranks=None):
    """ASCII PLY with the points and every trajectory's waypoints as vertices,
    and consecutive waypoints joined by edges.

    ``ranks`` (one per trajectory, 0 = lowest cost) sets an 8-bit gray level:
    darker means cheaper. Points are mid-gray.
    """
    P = np.asarray(points if points is not None else np.zeros((0, 3)), dtype=float).reshape(-1, 3)
    T = [] if trajectories is None else [np.asarray(t, dtype=float).reshape(-1, 3)
                                         for t in trajectories]
    if P.shape[0] == 0 and sum(len(t) for t in T) == 0:
        raise IoError("nothing to export: no points and no trajectory waypoints")
    if ranks is not None and len(ranks) != len(T):
        raise DimensionMismatch(f"{len(ranks)} ranks for {len(T)} trajectories")
    n_tr = max(len(T) - 1, 1)
    verts, edges = [], []
    for p in P:
        verts.append((p, 128))
    for j, t in enumerate(T):
        gray = 0 if ranks is None else int(round(224 * ranks[j] / n_tr))
        base = len(verts)
        for p in t:
            verts.append((p, gray))
        edges.extend((base + h, base + h + 1) for h in range(len(t) - 1))
    lines = ["ply", "format ascii 1.0", "comment affordkit export",
             f"element vertex {len(verts)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"element edge {len(edges)}", "property int vertex1", "property int vertex2",
             "end_header"]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {g} {g} {g}" for p, g in verts]
    lines += [f"{a} {b}" for a, b in edges]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return len(verts), len(edges)


def read_ply(path):
    """Parse an ASCII PLY written by :func:`export_ply`: (vertices, gray, edges)."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    nv = ne = 0
    for line in lines[:end]:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element edge"):
            ne = int(line.split()[-1])
    body = lines[end + 1:]
    V = np.array([[float(x) for x in body[i].split()[:3]] for i in range(nv)]).reshape(-1, 3)
    gray = np.array([int(body[i].split()[3]) for i in range(nv)], dtype=int)
    E = np.array([[int(x) for x in body[nv + i].split()] for i in range(ne)], dtype=int).reshape(-1, 2)
    return V, gray, E


def _floats(text: str, n: int | None = None):
    vals = [float(x) for x in text.split(",") if x.strip()]
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _bezier_control(path: np.ndarray) -> np.ndarray:
    """Least-squares middle control point of a quadratic Bezier through the
    first and last points of ``path`` (uniform parameter)."""
    s = np.linspace(0.0, 1.0, len(path))[:, None]
    rest = path - (1 - s) ** 2 * path[0] - s ** 2 * path[-1]
    w = 2 * (1 - s) * s
    return np.sum(w * rest, axis=0) / max(float(np.sum(w * w)), 1e-12)


def arc_samples(reference: np.ndarray, n: int, horizon: int, jitter: float, seed: int):
    """Quadratic Bezier arcs scattered around a reference path.

    Start and end move by up to ``jitter`` per axis, the control point by a
    third of that. Each sample's contact/goal are its own endpoints.
    """
    rng = np.random.default_rng(seed)
    ref = np.asarray(reference, dtype=float)
    ctrl0 = _bezier_control(ref)
    s = np.linspace(0.0, 1.0, horizon)[:, None]
    out = []
    for _ in range(n):
        a = ref[0] + rng.uniform(-jitter, jitter, 3)
        b = ref[-1] + rng.uniform(-jitter, jitter, 3)
        c = ctrl0 + (a - ref[0] + b - ref[-1]) / 2 + rng.uniform(-jitter / 3, jitter / 3, 3)
        tr = (1 - s) ** 2 * a + 2 * (1 - s) * s * c + s ** 2 * b
        out.append(afford.AffordanceSample(a[None], b[None], afford.Trajectory(tr), "synthetic arc"))
    return out


def cmd_synth(a):
    cfg = ingest.SynthConfig(n_frames=a.frames, n_landmarks=a.landmarks, scale=a.scale,
                             depth_noise=a.depth_noise, pose_noise_deg=a.pose_noise_deg,
                             pose_noise_m=a.pose_noise_m, width=a.width, height=a.height,
                             focal=a.focal, hand_path=a.hand_path, hand_radius=a.hand_radius)
    scene, gt = ingest.synth_scene(cfg, seed=a.seed)
    mpath = ingest.write_scene(scene, a.out, gt)
    print(f"wrote {mpath} ({len(scene.frames)} frames, {len(scene.landmarks)} landmarks)")
    if a.trajectories > 0:
        d = Path(a.out) / "trajectories"
        samples = arc_samples(gt.hand_trajectory, a.trajectories, a.horizon, a.traj_jitter,
                              a.seed + 1)
        for j, smp in enumerate(samples):
            write_json(d / f"sample_{j:04d}.json", smp.to_dict())
        print(f"wrote {len(samples)} training trajectories to {d}")
    return 0


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def cmd_calibrate(a):
    scene = ingest.load_scene(a.manifest)
    sol = metric.solve_global_scale(scene)
    write_json(a.out, sol.to_dict(), indent=1)
    print(f"s_g = {sol.s_g:.9g} (residual {sol.residual:.3g}, {sol.inlier_count} observations)")
    return 0


def cmd_refine(a):
    scene = ingest.load_scene(a.manifest)
    s_g = metric.ScaleSolution.from_dict(read_json(a.scale)).s_g
    opts = metric.RefineOptions(max_outer=a.max_outer, max_inner=a.max_inner, stride=a.stride,
                                solver=a.solver, step=a.step)
    t0 = time.time()
    res = metric.refine_poses_scales(scene, s_g, opts, reference=a.reference)
    out = res.to_dict([f.index for f in scene.frames])
    write_json(a.out, out, indent=1)
    E0, E1 = res.energy_trace[0], res.energy_trace[-1]
    print(f"reference frame {res.reference_index}: energy {E0:.4g} -> {E1:.4g} "
          f"in {len(res.energy_trace) - 1} outer steps ({time.time() - t0:.1f}s)")
    return 0


def _load_refined(path, scene):
    res = metric.RefinementResult.from_dict(read_json(path))
    if len(res.poses) != len(scene.frames):
        raise DimensionMismatch(f"refined file has {len(res.poses)} frames, scene has "
                                f"{len(scene.frames)}")
    return res


# ---------------------------------------------------------------------------
# affordance labels
# ---------------------------------------------------------------------------

def cmd_extract(a):
    scene = ingest.load_scene(a.manifest)
    res = _load_refined(a.refined, scene)
    if a.max_energy is not None and res.energy_trace:
        per_obs = res.energy_trace[-1] / max(res.n_correspondences, 1)
        if per_obs > a.max_energy:
            raise LowQualityLabel(f"final refinement energy {per_obs:.3g} per correspondence "
                                  f"exceeds --max-energy {a.max_energy:.3g}")
    traj = afford.extract_trajectory(scene, res)
    c, g = afford.extract_contact_goal(scene, res, traj, a.n_contact, a.n_goal, a.voxel)
    sample = afford.AffordanceSample(c, g, traj, a.instruction)
    write_json(a.out, sample.to_dict(), indent=1)
    print(f"trajectory of {len(traj)} waypoints, {len(c)} contact and {len(g)} goal points")
    if a.ply:
        export_ply(np.concatenate([c, g]), [traj.waypoints], a.ply)
    return 0


# ---------------------------------------------------------------------------
# tsdf
# ---------------------------------------------------------------------------

def _metric_pose_rel0(res, i):
    """Metric pose of frame i in frame-0 camera coordinates and the depth
    rescale s_0 / s_i."""
    rel = res.poses[0].inverse() @ res.poses[i]
    s0 = float(res.scales[0])
    return Pose(rel.q, s0 * rel.t), s0 / float(res.scales[i])


def cmd_fuse(a):
    scene = ingest.load_scene(a.manifest)
    K = scene.intrinsics
    frames = a.frame
    res = _load_refined(a.refined, scene) if a.refined else None
    if res is None and any(f != scene.frames[0].index for f in frames):
        raise ManifestParse("fusing frames other than the first needs --refined")
    vol = tsdf.TsdfVolume.for_frustum(K, Pose.identity(), a.near, a.far, a.voxel, a.truncation)
    for fi in frames:
        i = scene.position_of(fi)
        frame = scene.frames[i]
        if res is None:
            T, ratio = Pose.identity(), 1.0
        else:
            T, ratio = _metric_pose_rel0(res, i)
        depth = frame.depth * ratio
        mask = None if a.keep_dynamic else ~frame.static_mask
        vol.fuse_frame(depth, K, T, mask=mask)
    vol.save(a.out)
    print(f"fused {len(frames)} frame(s) into a {vol.dims[0]}x{vol.dims[1]}x{vol.dims[2]} volume "
          f"(voxel {vol.voxel_size} m)")
    return 0


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------

def load_dataset(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise MissingFile(f"data directory not found: {d}")
    files = sorted(d.glob("*.json"))
    if not files:
        raise EmptyDataset(f"no *.json samples in {d}")
    return [afford.AffordanceSample.from_dict(read_json(f)) for f in files]


def conditioning_of(sample: afford.AffordanceSample, unit: float = denoiser.PE_UNIT):
    """Conditioning from the representative goal/contact points (the first
    downsampled point of each set)."""
    return denoiser.encode_conditioning(sample.goal_points[0], sample.contact_points[0], unit=unit)


def _schedule_from_args(a):
    return diffusion.make_schedule(a.steps_k, a.beta_start, a.beta_end, a.schedule)


def cmd_train(a):
    samples = load_dataset(a.data)
    H = {len(s.trajectory) for s in samples}
    if len(H) != 1:
        raise DimensionMismatch(f"training trajectories have mixed horizons {sorted(H)}")
    H = H.pop()
    sched = _schedule_from_args(a)
    data = [(s.trajectory.waypoints, conditioning_of(s, a.unit)) for s in samples]
    d = denoiser.MlpDenoiser.create(H, data[0][1].size, widths=a.widths, seed=a.seed,
                                    normalize=not a.no_normalize)
    d.cond_unit = a.unit
    t0 = time.time()
    d, losses = denoiser.mlp_train(d, data, sched, epochs=a.epochs, lr=a.lr, seed=a.seed,
                                   batch_size=a.batch_size, momentum=a.momentum)
    d.save(a.out)
    n = max(len(losses) // 10, 1)
    first, last = float(np.median(losses[:n])), float(np.median(losses[-n:]))
    if a.losses:
        write_json(a.losses, {"loss": [float(x) for x in losses]})
    print(f"trained on {len(samples)} trajectories for {len(losses)} steps "
          f"({time.time() - t0:.0f}s): median loss {first:.4g} -> {last:.4g}")
    return 0


# ---------------------------------------------------------------------------
# generation and ranking
# ---------------------------------------------------------------------------

def resample(traj: np.ndarray, H: int) -> np.ndarray:
    """Piecewise-linear resampling to H waypoints at uniform index spacing."""
    traj = np.asarray(traj, dtype=float)
    s_old = np.linspace(0.0, 1.0, len(traj))
    s_new = np.linspace(0.0, 1.0, H)
    return np.stack([np.interp(s_new, s_old, traj[:, c]) for c in range(3)], axis=-1)


def nearest_surface_normal(vol: tsdf.TsdfVolume, points, max_dist: float = 0.5):
    """Surface normal at ``points``, or, where the field is flat there, at the
    observed near-surface voxel closest to their centroid."""
    try:
        return vol.surface_normal_at(points)
    except DegenerateNormal:
        pass
    c = np.mean(np.asarray(points, dtype=float).reshape(-1, 3), axis=0)
    near = (vol.weights > 0) & (np.abs(vol.values) < 0.5)
    if not np.any(near):
        raise DegenerateNormal("volume holds no observed surface")
    centers = vol.centers()[near]
    dist = np.linalg.norm(centers - c, axis=1)
    j = int(np.argmin(dist))
    if dist[j] > max_dist:
        raise DegenerateNormal(f"no surface within {max_dist} m of the contact points")
    return vol.surface_normal_at(centers[j])


def cmd_generate(a):
    sample = afford.AffordanceSample.from_dict(read_json(a.sample))
    vol = tsdf.TsdfVolume.load(a.volume)
    if a.model:
        model = denoiser.MlpDenoiser.load(a.model)
        if model.schedule is not None:
            sc = model.schedule
            sched = diffusion.make_schedule(int(sc["K"]), float(sc["beta_start"]),
                                            float(sc["beta_end"]), sc.get("kind", "linear"))
        else:
            sched = _schedule_from_args(a)
        cond = conditioning_of(sample, model.cond_unit)
    else:
        sched = _schedule_from_args(a)
        mean = resample(sample.trajectory.waypoints, a.horizon)
        model = denoiser.AnalyticDenoiser(denoiser.GmmPrior.single(mean, a.prior_std ** 2), sched)
        cond = np.zeros(0)
    c_bar = sample.contact_points[0]
    agent = costs.gripper_points(c_bar, a.gripper_points, a.gripper, a.gripper_size)
    normal = None
    lam_n = a.lambda_n
    if a.normal == "auto":
        try:
            normal = nearest_surface_normal(vol, sample.contact_points)
        except DegenerateNormal as e:
            log.warning("normal guidance disabled: %s", e)
            lam_n = 0.0
    elif a.normal != "none":
        n = np.asarray(_floats(a.normal, 3))
        normal = n / np.linalg.norm(n)
    else:
        lam_n = 0.0
    cfg = costs.GuidanceConfig(a.lambda_g, a.lambda_c, lam_n, goals=sample.goal_points,
                               agent_points=agent, normal=normal, volume=vol)
    t0 = time.time()
    batch = diffusion.guided_sample(model, cond, cfg, sched, a.n, a.seed, g_steps=a.g_steps,
                                    mode=a.mode, volume=vol)
    out = batch.to_dict()
    out["config"] = {"seed": a.seed, "n": a.n, "lambda_g": a.lambda_g, "lambda_c": a.lambda_c,
                     "lambda_n": lam_n, "mode": a.mode, "model": str(a.model) if a.model else None,
                     "schedule": sched.to_dict()}
    out["goals"] = sample.goal_points.tolist()
    out["agent_points"] = agent.tolist()
    out["normal"] = None if normal is None else normal.tolist()
    write_json(a.out, out)
    tot = batch.totals()
    print(f"generated {a.n} trajectories ({time.time() - t0:.1f}s); total cost "
          f"min {tot.min():.4g} median {np.median(tot):.4g} max {tot.max():.4g}")
    return 0


def cmd_rank(a):
    d = read_json(a.batch)
    try:
        batch = diffusion.SampleBatch.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestParse(f"{a.batch}: not a sample batch ({e})") from e
    order = diffusion.rank_by_cost(batch)
    print("rank index total goal collide normal")
    for r, i in enumerate(order[:a.top] if a.top else order):
        c = batch.costs[i]
        print(f"{r} {i} {c.total:.6g} {c.goal:.6g} {c.collide:.6g} {c.normal:.6g}")
    if a.out:
        write_json(a.out, {"order": [int(i) for i in order],
                           "totals": [float(batch.costs[i].total) for i in order]})
    if a.ply:
        ranks = np.empty(len(order), dtype=int)
        ranks[order] = np.arange(len(order))
        goals = np.asarray(d.get("goals", np.zeros((0, 3))), dtype=float).reshape(-1, 3)
        export_ply(goals, list(batch.trajectories), a.ply, ranks)
    return 0


def cmd_gradcheck(a):
    targets = [t.strip() for t in a.targets.split(",") if t.strip()]
    if not targets:
        raise _Usage("gradcheck needs at least one target")
    report = gradcheck.run_gradcheck(targets, a.seed, a.points)
    ok = True
    for t, err in report.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{t:10s} worst rel. error {err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_schedule(p):
    p.add_argument("--steps-k", type=int, default=diffusion.DEFAULT_K,
                   help="diffusion steps K (default %(default)s)")
    p.add_argument("--beta-start", type=float, default=diffusion.DEFAULT_BETA[0])
    p.add_argument("--beta-end", type=float, default=diffusion.DEFAULT_BETA[1])
    p.add_argument("--schedule", choices=["linear", "cosine"], default="linear")


def build_parser() -> argparse.ArgumentParser:
    df = "(default %(default)s)"
    ap = _Parser(prog="affordkit", description="Metric trajectory recovery, affordance labels "
                 "and cost-guided trajectory diffusion.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv debug)")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic scene (and optional training arcs)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--landmarks", type=int, default=200)
    p.add_argument("--scale", type=float, default=2.0, help=f"true global scale {df}")
    p.add_argument("--depth-noise", type=float, default=0.0, help=f"multiplicative std {df}")
    p.add_argument("--pose-noise-deg", type=float, default=0.0)
    p.add_argument("--pose-noise-m", type=float, default=0.0)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--focal", type=float, default=300.0)
    p.add_argument("--hand-path", choices=["arc", "line", "static"], default="arc")
    p.add_argument("--hand-radius", type=float, default=0.04)
    p.add_argument("--trajectories", type=int, default=0,
                   help=f"also write N training arcs around the true hand path {df}")
    p.add_argument("--horizon", type=int, default=diffusion.DEFAULT_H)
    p.add_argument("--traj-jitter", type=float, default=0.05, help=f"endpoint jitter, m {df}")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("calibrate-scale", help="closed-form global metric scale")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("refine-poses", help="joint pose and per-frame scale refinement")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", required=True, help="scale.json from calibrate-scale")
    p.add_argument("--out", required=True)
    p.add_argument("--solver", choices=["gauss-newton", "gd"], default="gauss-newton")
    p.add_argument("--step", type=float, default=1.0, help=f"initial step size {df}")
    p.add_argument("--max-outer", type=int, default=60)
    p.add_argument("--max-inner", type=int, default=25)
    p.add_argument("--stride", type=int, default=4, help=f"pixel stride of source samples {df}")
    p.add_argument("--reference", type=int, default=None,
                   help="reference frame position (default: most co-visible)")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("extract-affordance", help="trajectory, contact and goal labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--refined", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ply", default=None, help="also export points and trajectory as PLY")
    p.add_argument("--n-contact", type=int, default=32)
    p.add_argument("--n-goal", type=int, default=32)
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--instruction", default="")
    p.add_argument("--max-energy", type=float, default=None,
                   help="reject labels whose final refinement energy per correspondence "
                        "exceeds this (default: no cutoff)")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("fuse-tsdf", help="fuse depth into a TSDF volume")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frame", type=int, nargs="+", default=[0],
                   help=f"frame indices to fuse {df}; others than the first need --refined")
    p.add_argument("--refined", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--truncation", type=float, default=None, help="default 5 voxels")
    p.add_argument("--near", type=float, default=0.1)
    p.add_argument("--far", type=float, default=2.0)
    p.add_argument("--keep-dynamic", action="store_true",
                   help="fuse hand/object pixels too (masked out by default)")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("train-denoiser", help="train the MLP x0 denoiser")
    p.add_argument("--data", required=True, help="directory of sample JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--widths", type=_ints, default=[256, 256], help="hidden widths, e.g. 256,256")
    p.add_argument("--unit", type=float, default=denoiser.PE_UNIT,
                   help=f"length unit of the conditioning encoding, m {df}")
    p.add_argument("--no-normalize", action="store_true",
                   help="predict x0 in meters instead of in units of the data spread")
    p.add_argument("--losses", default=None, help="write the loss curve as JSON")
    _add_schedule(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="cost-guided trajectory sampling")
    p.add_argument("--volume", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None,
                   help="trained model (default: Gaussian prior around the sample trajectory)")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-g", type=float, default=1.0)
    p.add_argument("--lambda-c", type=float, default=1.0)
    p.add_argument("--lambda-n", type=float, default=0.1)
    p.add_argument("--normal", default="auto",
                   help="'auto' (from the volume), 'none', or x,y,z")
    p.add_argument("--mode", choices=["direct-on-x0", "through-denoiser"], default="direct-on-x0")
    p.add_argument("--g-steps", type=int, default=1)
    p.add_argument("--gripper", choices=["box", "sphere"], default="box")
    p.add_argument("--gripper-points", type=int, default=32)
    p.add_argument("--gripper-size", type=lambda s: _floats(s), default=[0.02, 0.08, 0.04],
                   help="box extents or sphere radius, m")
    p.add_argument("--horizon", type=int, default=diffusion.DEFAULT_H,
                   help="horizon of the prior when no model is given")
    p.add_argument("--prior-std", type=float, default=0.02,
                   help=f"std of the prior when no model is given, m {df}")
    _add_schedule(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("rank", help="order a batch by total cost")
    p.add_argument("--batch", required=True)
    p.add_argument("--top", type=int, default=0, help="print only the first N")
    p.add_argument("--out", default=None, help="write the order as JSON")
    p.add_argument("--ply", default=None, help="export trajectories shaded by rank")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--targets", default=",".join(gradcheck.TARGETS),
                   help=f"comma-separated subset of {','.join(gradcheck.TARGETS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except _Usage as e:
        print(str(e), file=sys.stderr, end="")
        return 2
    except SystemExit as e:       # --help
        return int(e.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(a.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.fn(a)
    except _Usage as e:
        print(f"affordkit {a.command}: {e}", file=sys.stderr)
        return 2
    except AffordkitError as e:
        print(f"affordkit {a.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
