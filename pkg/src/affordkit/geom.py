"""Pinhole camera model, rigid transforms and the se(3) exponential/log maps.

Conventions
-----------
* Poses are world-from-camera (``T_WC``): ``T.apply(p_cam)`` gives world points.
* Quaternions are stored ``(x, y, z, w)`` and re-normalized on construction.
* Pixels are ``(u, v) = (column, row)`` with integer values at pixel centers.
* Twists are ordered rotation first, then translation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDepth, LogNearPi, NonPositiveDepth

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape as (rows, cols)."""
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# ---------------------------------------------------------------------------
# quaternion helpers (x, y, z, w)
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform. ``q`` is a unit quaternion (x, y, z, w), ``t`` in meters."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("degenerate quaternion")
        q = q / n
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_R", quat_to_matrix(q))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @property
    def R(self) -> np.ndarray:
        return self._R

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "Pose":
        qi = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        return Pose(qi, -(self._R.T @ self.t))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self._R @ other.t + self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self._R.T + self.t

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["q"], dtype=float), np.asarray(d["t"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.q.tobytes(), self.t.tobytes()))


def transform_point(T: Pose, p) -> np.ndarray:
    return T.apply(p)


# ---------------------------------------------------------------------------
# se(3)
# ---------------------------------------------------------------------------

def _so3_coeffs(theta: float):
    """A = sin(th)/th, B = (1-cos th)/th^2, C = (th - sin th)/th^3 with series near 0."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    half = 0.5 * theta
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    q = np.array([k * w[0], k * w[1], k * w[2], np.cos(half)])
    _, B, C = _so3_coeffs(theta)
    W = hat(w)
    V = np.eye(3) + B * W + C * (W @ W)
    return Pose(q, V @ v)


def se3_log(T: Pose) -> np.ndarray:
    q = T.q if T.q[3] >= 0 else -T.q
    vn = float(np.linalg.norm(q[:3]))
    theta = 2.0 * np.arctan2(vn, q[3])
    if theta >= np.pi - 1e-6:
        raise LogNearPi(f"rotation angle {theta:.9f} too close to pi")
    if vn < 1e-12:
        w = 2.0 * q[:3] / q[3]
    else:
        w = theta * q[:3] / vn
    W = hat(w)
    if theta < 1e-4:
        D = 1.0 / 12.0 + theta * theta / 720.0
    else:
        D = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    V_inv = np.eye(3) - 0.5 * W + D * (W @ W)
    return np.concatenate([w, V_inv @ T.t])


def rotation_angle(R: np.ndarray) -> float:
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

def project(point, K: Intrinsics) -> np.ndarray:
    x, y, z = np.asarray(point, dtype=float).reshape(3)
    if not z > MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {z} is not in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def backproject(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidDepth(f"depth {depth} must be positive and finite")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, float(depth)])


def project_points(P: np.ndarray, K: Intrinsics):
    """Vectorized projection. Returns (uv, in_front) without raising."""
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * P[..., 0] / zs + K.cx, K.fy * P[..., 1] / zs + K.cy], axis=-1)
    return uv, ok


def backproject_points(uv: np.ndarray, depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - K.cx) / K.fx * d
    y = (uv[..., 1] - K.cy) / K.fy * d
    return np.stack([x, y, d], axis=-1)


def pixel_grid(K: Intrinsics, stride: int = 1):
    """Integer pixel centers (u, v) on a regular grid, plus their (row, col) indices."""
    rows = np.arange(0, K.height, stride)
    cols = np.arange(0, K.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    return np.stack([cc, rr], axis=-1).astype(float), rr, cc


def sample_depth(depth: np.ndarray, uv: np.ndarray, static: np.ndarray | None = None):
    """Sub-pixel depth lookup by bilinear interpolation of inverse depth.

    Inverse depth is affine in the pixel coordinates on any plane, so this is
    exact on planar surfaces. The four stencil pixels must all be valid (and
    static when a mask is given); otherwise the result is NaN.

    Returns ``(z, zmin, zmax)`` where zmin/zmax are the stencil extremes.
    """
    uv = np.asarray(uv, dtype=float)
    h, w = depth.shape
    u, v = uv[..., 0], uv[..., 1]
    inside = (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    c0 = np.minimum(np.floor(uc).astype(int), max(w - 2, 0))
    r0 = np.minimum(np.floor(vc).astype(int), max(h - 2, 0))
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fu = uc - c0
    fv = vc - r0
    d00, d01 = depth[r0, c0], depth[r0, c1]
    d10, d11 = depth[r1, c0], depth[r1, c1]
    stack = np.stack([d00, d01, d10, d11], axis=-1).astype(float)
    valid = inside & np.all(np.isfinite(stack) & (stack > 0), axis=-1)
    if static is not None:
        st = static[r0, c0] & static[r0, c1] & static[r1, c0] & static[r1, c1]
        valid &= st
    safe = np.where(valid[..., None], stack, 1.0)
    inv = 1.0 / safe
    i_top = inv[..., 0] * (1 - fu) + inv[..., 1] * fu
    i_bot = inv[..., 2] * (1 - fu) + inv[..., 3] * fu
    z = 1.0 / (i_top * (1 - fv) + i_bot * fv)
    z = np.where(valid, z, np.nan)
    zmin = np.where(valid, safe.min(axis=-1), np.nan)
    zmax = np.where(valid, safe.max(axis=-1), np.nan)
    return z, zmin, zmax


def nearest_pixel(uv: np.ndarray, K: Intrinsics):
    """Round continuous pixels to (row, col) indices and flag in-bounds entries."""
    uv = np.asarray(uv, dtype=float)
    c = np.rint(uv[..., 0])
    r = np.rint(uv[..., 1])
    ok = (c >= 0) & (r >= 0) & (c < K.width) & (r < K.height) & np.isfinite(c) & np.isfinite(r)
    c = np.where(ok, c, 0).astype(int)
    r = np.where(ok, r, 0).astype(int)
    return r, c, ok
