"""Scene inputs: per-frame depth/masks/poses, SfM landmarks, and a synthetic
scene generator with known ground truth.

File layout (all paths relative to the manifest directory)::

    manifest.json   {"intrinsics": {...}, "frames": [...], "landmarks_path": ...}
    *.f32           raw little-endian float32 depth, row-major, NaN = invalid
    *.pgm           binary P5 masks, nonzero = masked
    landmarks.json  [{"id", "xyz": [..], "obs": [[frame_index, u, v], ...]}]
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (BadLandmarkObservation, DegenerateConfig, DimensionMismatch,
                     ManifestParse, MissingFile)
from .geom import Intrinsics, Pose, project_points


@dataclass
class FrameObservation:
    index: int
    depth: np.ndarray
    hand_mask: np.ndarray
    object_mask: np.ndarray
    pose_init: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        shape = self.intrinsics.shape
        for name in ("depth", "hand_mask", "object_mask"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionMismatch(
                    f"frame {self.index}: {name} has shape {arr.shape}, expected {shape}")
        self.hand_mask = np.asarray(self.hand_mask, dtype=bool)
        self.object_mask = np.asarray(self.object_mask, dtype=bool)

    @property
    def static_mask(self) -> np.ndarray:
        return ~(self.hand_mask | self.object_mask)


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    observations: list  # [(frame_index, u, v), ...]


@dataclass
class SceneBundle:
    frames: list
    landmarks: list
    static_masks: list = field(default_factory=list)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.index)
        self.static_masks = [f.static_mask for f in self.frames]

    @property
    def intrinsics(self) -> Intrinsics:
        return self.frames[0].intrinsics

    def position_of(self, frame_index: int) -> int:
        for i, f in enumerate(self.frames):
            if f.index == frame_index:
                return i
        raise KeyError(frame_index)

    def with_poses(self, poses) -> "SceneBundle":
        frames = [FrameObservation(f.index, f.depth, f.hand_mask, f.object_mask, p, f.intrinsics)
                  for f, p in zip(self.frames, poses)]
        return SceneBundle(frames, self.landmarks)


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------

def _read_mask(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.shape != tuple(shape):
        raise DimensionMismatch(f"{path.name}: mask shape {arr.shape}, expected {tuple(shape)}")
    return arr != 0


def _read_depth(path: Path, K: Intrinsics) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != K.width * K.height:
        raise DimensionMismatch(
            f"{path.name}: {raw.size} depth values, expected {K.width}x{K.height}")
    d = raw.reshape(K.height, K.width).astype(np.float64)
    if np.any(d[np.isfinite(d)] < 0):
        raise ManifestParse(f"{path.name}: negative depth values")
    return d


def load_scene(manifest_path) -> SceneBundle:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    root = manifest_path.parent
    try:
        m = json.loads(manifest_path.read_text(encoding="utf-8"))
        K = Intrinsics.from_dict(m["intrinsics"])
        frame_specs = m["frames"]
        lm_path = root / m["landmarks_path"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ManifestParse(f"{manifest_path}: {e}") from e

    frames = []
    for fs in frame_specs:
        try:
            idx = int(fs["index"])
            pose = Pose.from_dict(fs["pose_wc"])
            dp, hp, op = fs["depth_path"], fs["hand_mask_path"], fs["object_mask_path"]
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestParse(f"bad frame entry: {e}") from e
        depth = _read_depth(root / dp, K)
        hand = _read_mask(root / hp, K.shape)
        obj = _read_mask(root / op, K.shape)
        frames.append(FrameObservation(idx, depth, hand, obj, pose, K))
    if not frames:
        raise ManifestParse("manifest lists no frames")

    if not lm_path.exists():
        raise MissingFile(str(lm_path))
    try:
        lm_raw = json.loads(lm_path.read_text(encoding="utf-8"))
        landmarks = [Landmark(int(e["id"]), np.asarray(e["xyz"], dtype=float).reshape(3),
                              [(int(o[0]), float(o[1]), float(o[2])) for o in e["obs"]])
                     for e in lm_raw]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
        raise ManifestParse(f"{lm_path}: {e}") from e

    known = {f.index for f in frames}
    for lm in landmarks:
        if len(lm.observations) < 2:
            raise BadLandmarkObservation(f"landmark {lm.id} has fewer than 2 observations")
        for fi, u, v in lm.observations:
            if fi not in known:
                raise BadLandmarkObservation(f"landmark {lm.id} observed in unknown frame {fi}")
            if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
                raise BadLandmarkObservation(
                    f"landmark {lm.id}: pixel ({u}, {v}) outside frame {fi}")
    return SceneBundle(frames, landmarks)


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_mask(path: Path, mask: np.ndarray):
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(tmp, format="PPM")
    os.replace(tmp, path)


def write_scene(bundle: SceneBundle, out_dir, ground_truth=None) -> Path:
    """Serialize a bundle; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = bundle.intrinsics
    frames = []
    for f in bundle.frames:
        dname = f"frame_{f.index:04d}_depth.f32"
        hname = f"frame_{f.index:04d}_hand.pgm"
        oname = f"frame_{f.index:04d}_object.pgm"
        _atomic_write_bytes(out / dname, np.ascontiguousarray(f.depth, dtype="<f4").tobytes())
        _write_mask(out / hname, f.hand_mask)
        _write_mask(out / oname, f.object_mask)
        frames.append({"index": f.index, "depth_path": dname, "hand_mask_path": hname,
                       "object_mask_path": oname, "pose_wc": f.pose_init.to_dict()})
    lms = [{"id": lm.id, "xyz": [float(x) for x in lm.position],
            "obs": [[int(o[0]), float(o[1]), float(o[2])] for o in lm.observations]}
           for lm in bundle.landmarks]
    _atomic_write_bytes(out / "landmarks.json", json.dumps(lms).encode())
    manifest = {"intrinsics": K.to_dict(), "frames": frames, "landmarks_path": "landmarks.json"}
    if ground_truth is not None:
        _atomic_write_bytes(out / "ground_truth.json", json.dumps(ground_truth.to_dict()).encode())
    mpath = out / "manifest.json"
    _atomic_write_bytes(mpath, json.dumps(manifest, indent=1).encode())
    return mpath


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_frames: int = 8
    n_landmarks: int = 200
    scale: float = 2.0              # true global scale s_g (metric / SfM units)
    depth_noise: float = 0.0        # multiplicative std of rendered depth
    pose_noise_deg: float = 0.0     # rotation perturbation of SfM poses
    pose_noise_m: float = 0.0       # translation perturbation (metric)
    scale_jitter: float = 0.0       # log-std of per-frame depth scale
    width: int = 320
    height: int = 240
    focal: float = 300.0
    camera_arc_deg: float = 20.0
    hand: bool = True
    hand_radius: float = 0.04
    hand_path: str = "arc"          # "arc" | "line" | "static"
    object_radius: float = 0.0


@dataclass
class GroundTruth:
    scale: float
    frame_scales: np.ndarray
    poses_metric: list      # T_WC in the metric world
    poses_sfm: list         # noiseless SfM poses (translation / scale)
    hand_centers_world: np.ndarray
    hand_trajectory: np.ndarray   # frame-0 camera coordinates, meters
    hand_radius: float

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "frame_scales": self.frame_scales.tolist(),
            "poses_metric": [p.to_dict() for p in self.poses_metric],
            "poses_sfm": [p.to_dict() for p in self.poses_sfm],
            "hand_centers_world": self.hand_centers_world.tolist(),
            "hand_trajectory": self.hand_trajectory.tolist(),
            "hand_radius": self.hand_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(float(d["scale"]), np.asarray(d["frame_scales"]),
                   [Pose.from_dict(p) for p in d["poses_metric"]],
                   [Pose.from_dict(p) for p in d["poses_sfm"]],
                   np.asarray(d["hand_centers_world"]), np.asarray(d["hand_trajectory"]),
                   float(d["hand_radius"]))


def _rot(axis: str, deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass
class _Rect:
    center: np.ndarray
    axes: np.ndarray        # 2x3 in-plane unit axes
    half: tuple             # half extents along the axes (inf for unbounded)

    @property
    def normal(self):
        return np.cross(self.axes[0], self.axes[1])


def _environment():
    # a tilted back wall plus three floating panels with independent normals,
    # separated in depth so panel silhouettes are clear depth discontinuities
    def rect(center, R, half):
        return _Rect(np.asarray(center, float), R[:, :2].T.copy(), half)
    wall = rect([0.0, 0.0, 2.6], _rot("y", 8) @ _rot("x", 5), (np.inf, np.inf))
    p1 = rect([-0.42, -0.05, 1.55], _rot("y", 40) @ _rot("x", 10), (0.22, 0.3))
    p2 = rect([0.45, 0.02, 1.65], _rot("y", -35) @ _rot("x", -20), (0.2, 0.25))
    p3 = rect([0.02, 0.40, 1.6], _rot("x", 60), (0.25, 0.16))
    return [wall, p1, p2, p3]


def _camera_poses(cfg: SynthConfig):
    pivot = np.array([0.0, 0.0, 1.7])
    radius = 1.7
    half = np.deg2rad(cfg.camera_arc_deg) / 2
    phis = np.linspace(-half, half, cfg.n_frames)
    poses = []
    for i, phi in enumerate(phis):
        c = pivot + radius * np.array([np.sin(phi), 0.0, -np.cos(phi)])
        c[1] += 0.04 * np.sin(np.pi * i / max(cfg.n_frames - 1, 1))
        z = pivot - c
        z /= np.linalg.norm(z)
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        poses.append(Pose.from_matrix(np.stack([x, y, z], axis=1), c))
    return poses


def _hand_path(cfg: SynthConfig, s: np.ndarray) -> np.ndarray:
    start = np.array([-0.30, -0.02, 1.30])
    end = np.array([-0.02, -0.20, 1.05])
    if cfg.hand_path == "static":
        return np.repeat(start[None], len(s), axis=0)
    if cfg.hand_path == "line":
        return start + s[:, None] * (end - start)
    # quadratic Bezier, C1 everywhere
    ctrl = 0.5 * (start + end) + np.array([0.0, -0.12, -0.05])
    s = s[:, None]
    return (1 - s) ** 2 * start + 2 * (1 - s) * s * ctrl + s ** 2 * end


def _render(cam: Pose, K: Intrinsics, surfaces, discs):
    """Ray-cast z-depth and surface ids. ``discs`` are camera-facing billboards
    given as (center_world, radius, id)."""
    h, w = K.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    dirs_c = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    dirs_w = dirs_c @ cam.R.T
    o = cam.t
    depth = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=int)
    for sid, s in enumerate(surfaces):
        n = s.normal
        denom = dirs_w @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((s.center - o) @ n) / denom
        hit = np.isfinite(lam) & (lam > 1e-6)
        p = o + lam[..., None] * dirs_w
        rel = p - s.center
        for ax, hx in zip(s.axes, s.half):
            if np.isfinite(hx):
                hit &= np.abs(rel @ ax) <= hx
        closer = hit & (lam < depth)
        depth[closer] = lam[closer]
        ids[closer] = sid
    for center, radius, did in discs:
        cc = cam.inverse().apply(center)
        if cc[2] <= 1e-6:
            continue
        px = dirs_c[..., 0] * cc[2] - cc[0]
        py = dirs_c[..., 1] * cc[2] - cc[1]
        hit = (px * px + py * py <= radius * radius) & (cc[2] < depth)
        depth[hit] = cc[2]
        ids[hit] = did
    depth[~np.isfinite(depth)] = np.nan
    return depth, ids


def synth_scene(config: SynthConfig | None = None, seed: int = 0):
    """Generate a SceneBundle in SfM units together with its GroundTruth.

    Dense depth is rendered in meters, so it equals ``scale`` times the
    landmark depth in SfM units. Landmark observations are kept only where the
    whole 2x2 interpolation stencil sees the landmark's own surface, which
    makes the scale residual vanish exactly in the noiseless case.
    """
    cfg = config or SynthConfig()
    if cfg.n_frames < 2 or cfg.n_landmarks < 8 or not cfg.scale > 0:
        raise DegenerateConfig("need >= 2 frames, >= 8 landmarks and a positive scale")
    if min(cfg.depth_noise, cfg.pose_noise_deg, cfg.pose_noise_m, cfg.scale_jitter) < 0:
        raise DegenerateConfig("noise magnitudes must be non-negative")
    if cfg.camera_arc_deg <= 0:
        raise DegenerateConfig("all cameras coincide (camera_arc_deg must be positive)")
    if cfg.hand_path not in ("arc", "line", "static"):
        raise DegenerateConfig(f"unknown hand path {cfg.hand_path!r}")

    rng = np.random.default_rng(seed)
    K = Intrinsics(cfg.focal, cfg.focal, (cfg.width - 1) / 2, (cfg.height - 1) / 2,
                   cfg.width, cfg.height)
    surfaces = _environment()
    cams = _camera_poses(cfg)
    s = np.linspace(0.0, 1.0, cfg.n_frames)
    hand_world = _hand_path(cfg, s)
    obj_offset = np.array([cfg.hand_radius + cfg.object_radius, 0.0, 0.0])

    HAND_ID, OBJ_ID = 100, 101
    renders = []
    for i, cam in enumerate(cams):
        discs = []
        if cfg.hand:
            discs.append((hand_world[i], cfg.hand_radius, HAND_ID))
            if cfg.object_radius > 0:
                discs.append((hand_world[i] + obj_offset, cfg.object_radius, OBJ_ID))
        renders.append(_render(cam, K, surfaces, discs))

    rho = np.exp(cfg.scale_jitter * rng.standard_normal(cfg.n_frames)) if cfg.scale_jitter > 0 \
        else np.ones(cfg.n_frames)
    frame_scales = cfg.scale * rho

    # landmarks on the static surfaces
    probs = np.array([0.4, 0.2, 0.2, 0.2])
    landmarks = []
    attempts = 0
    while len(landmarks) < cfg.n_landmarks:
        attempts += 1
        if attempts > 200 * cfg.n_landmarks:
            raise DegenerateConfig("could not place landmarks with >= 2 observations")
        sid = int(rng.choice(len(surfaces), p=probs))
        surf = surfaces[sid]
        if sid == 0:
            a, b = rng.uniform(-1.1, 1.1), rng.uniform(-0.8, 0.8)
        else:
            a = rng.uniform(-surf.half[0] + 0.04, surf.half[0] - 0.04)
            b = rng.uniform(-surf.half[1] + 0.04, surf.half[1] - 0.04)
        X = surf.center + a * surf.axes[0] + b * surf.axes[1]
        obs = []
        for i, cam in enumerate(cams):
            pc = cam.inverse().apply(X)
            uv, ok = project_points(pc, K)
            if not ok:
                continue
            u, v = uv
            if not (0 <= u <= K.width - 2 and 0 <= v <= K.height - 2):
                continue
            c0, r0 = int(np.floor(u)), int(np.floor(v))
            ids = renders[i][1]
            if np.all(ids[r0:r0 + 2, c0:c0 + 2] == sid):
                obs.append((i, float(u), float(v)))
        if len(obs) >= 2:
            landmarks.append(Landmark(len(landmarks), X / cfg.scale, obs))

    frames = []
    poses_sfm = []
    for i, cam in enumerate(cams):
        depth, ids = renders[i]
        depth = depth * rho[i]
        if cfg.depth_noise > 0:
            depth = depth * (1.0 + cfg.depth_noise * rng.standard_normal(depth.shape))
        hand_mask = ids == HAND_ID
        obj_mask = ids == OBJ_ID
        p_sfm = Pose(cam.q, cam.t / cfg.scale)
        poses_sfm.append(p_sfm)
        p_init = p_sfm
        if cfg.pose_noise_deg > 0 or cfg.pose_noise_m > 0:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            dR = Pose(np.concatenate([axis * np.sin(np.deg2rad(cfg.pose_noise_deg) / 2),
                                      [np.cos(np.deg2rad(cfg.pose_noise_deg) / 2)]]))
            dt = rng.standard_normal(3)
            dt *= cfg.pose_noise_m / cfg.scale / np.linalg.norm(dt)
            p_init = Pose((dR @ Pose(p_sfm.q)).q, p_sfm.t + dt)
        frames.append(FrameObservation(i, depth, hand_mask, obj_mask, p_init, K))

    traj = cams[0].inverse().apply(hand_world)
    gt = GroundTruth(cfg.scale, frame_scales, cams, poses_sfm, hand_world, traj, cfg.hand_radius)
    return SceneBundle(frames, landmarks), gt
