"""Dense TSDF volume with projective fusion and trilinear queries.

Voxel (ix, iy, iz) has its center at ``origin + voxel_size * (ix, iy, iz)``.
Values are signed distances divided by the truncation distance and clamped to
[-1, 1]; positive in front of the surface. Unobserved voxels hold +1 with
weight 0, and everything outside the grid reads as +1 (free space).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateNormal, DimensionMismatch, IoError, MissingFile
from .geom import Intrinsics, Pose

CELL_EPS = 1e-9   # grid-unit tolerance of the inside test


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: float
    values: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise DimensionMismatch(f"dims must be 3 integers >= 2, got {self.dims}")
        if not (self.voxel_size > 0 and self.truncation > 0):
            raise ValueError("voxel_size and truncation must be positive")
        if self.values is None:
            self.values = np.ones(self.dims)
        if self.weights is None:
            self.weights = np.zeros(self.dims)
        self.values = np.asarray(self.values, dtype=float).reshape(self.dims)
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.dims)

    @classmethod
    def empty(cls, lo, hi, voxel_size: float = 0.01, truncation: float | None = None):
        """Grid covering the axis-aligned box [lo, hi] (inclusive of both ends)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
        trunc = 5 * voxel_size if truncation is None else truncation
        return cls(lo, voxel_size, tuple(dims), trunc)

    @classmethod
    def from_sdf(cls, fn, lo, hi, voxel_size: float, truncation: float):
        """Fill from an analytic signed distance function (meters)."""
        vol = cls.empty(lo, hi, voxel_size, truncation)
        c = vol.centers().reshape(-1, 3)
        vol.values = np.clip(np.asarray(fn(c), dtype=float) / truncation, -1, 1).reshape(vol.dims)
        vol.weights = np.ones(vol.dims)
        return vol

    @classmethod
    def for_frustum(cls, K: Intrinsics, T_WC: Pose, near: float = 0.1, far: float = 2.0,
                    voxel_size: float = 0.01, truncation: float | None = None):
        lo, hi = frustum_bounds(K, T_WC, near, far)
        return cls.empty(lo, hi, voxel_size, truncation)

    def centers(self) -> np.ndarray:
        ix, iy, iz = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
        return self.origin + self.voxel_size * np.stack([ix, iy, iz], axis=-1)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation,
                          self.values.copy(), self.weights.copy())

    # queries ----------------------------------------------------------------

    def _cell(self, p):
        g = (np.asarray(p, dtype=float) - self.origin) / self.voxel_size
        dims = np.array(self.dims)
        # a hair of slack so centers computed as origin + size * index stay inside
        inside = np.all((g >= -CELL_EPS) & (g <= dims - 1 + CELL_EPS), axis=-1)
        i0 = np.clip(np.floor(g).astype(int), 0, dims - 2)
        f = g - i0
        return i0, f, inside

    def _corners(self, i0):
        """The 8 corner values of each cell, stacked on a leading axis in the
        order (dx, dy, dz) = 000, 001, 010, ..., 111."""
        _, ny, nz = self.dims
        base = (i0[..., 0] * ny + i0[..., 1]) * nz + i0[..., 2]
        off = np.array([0, 1, nz, nz + 1, ny * nz, ny * nz + 1, ny * nz + nz, ny * nz + nz + 1])
        return np.take(self.values.reshape(-1), off.reshape((8,) + (1,) * base.ndim) + base)

    def _interp(self, p, want_value=True, want_grad=True):
        i0, f, inside = self._cell(p)
        c = self._corners(i0)
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        c00 = c[0] * (1 - fz) + c[1] * fz
        c01 = c[2] * (1 - fz) + c[3] * fz
        c10 = c[4] * (1 - fz) + c[5] * fz
        c11 = c[6] * (1 - fz) + c[7] * fz
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        val = grad = None
        if want_value:
            val = np.where(inside, c0 * (1 - fx) + c1 * fx, 1.0)
        if want_grad:
            gx = c1 - c0
            gy = (c01 - c00) * (1 - fx) + (c11 - c10) * fx
            dz00 = c[1] - c[0]
            dz01 = c[3] - c[2]
            dz10 = c[5] - c[4]
            dz11 = c[7] - c[6]
            gz = (dz00 * (1 - fy) + dz01 * fy) * (1 - fx) + (dz10 * (1 - fy) + dz11 * fy) * fx
            g = np.stack([gx, gy, gz], axis=-1) / self.voxel_size
            grad = np.where(inside[..., None], g, 0.0)
        return val, grad

    def query(self, p) -> np.ndarray:
        """Trilinear value at points ``p`` (..., 3); +1 outside the grid."""
        return self._interp(p, want_grad=False)[0]

    def query_gradient(self, p) -> np.ndarray:
        """Analytic gradient of the trilinear interpolant (per meter); 0 outside."""
        return self._interp(p, want_value=False)[1]

    def query_with_gradient(self, p):
        """(value, gradient) from one corner lookup."""
        return self._interp(p)

    def surface_normal_at(self, p) -> np.ndarray:
        """Unit normal at one point, or the normalized mean of per-point normals."""
        P = np.asarray(p, dtype=float).reshape(-1, 3)
        g = self.query_gradient(P)
        n = np.linalg.norm(g, axis=-1)
        if np.any(n <= 1e-9):
            raise DegenerateNormal("TSDF gradient vanishes at a query point")
        m = np.mean(g / n[:, None], axis=0)
        nm = np.linalg.norm(m)
        if nm <= 1e-9:
            raise DegenerateNormal("per-point normals cancel out")
        return m / nm

    # fusion ----------------------------------------------------------------

    def fuse_frame(self, depth: np.ndarray, K: Intrinsics, T_WC: Pose, mask=None,
                   chunk: int = 1 << 20):
        """Integrate one z-depth map. ``mask`` marks pixels to ignore (e.g. the hand)."""
        depth = np.asarray(depth, dtype=float)
        if depth.shape != K.shape:
            raise DimensionMismatch(f"depth {depth.shape} vs intrinsics {K.shape}")
        T_CW = T_WC.inverse()
        vals = self.values.reshape(-1)
        wts = self.weights.reshape(-1)
        n = vals.size
        nx, ny, nz = self.dims
        for s in range(0, n, chunk):
            flat = np.arange(s, min(s + chunk, n))
            ix, rem = np.divmod(flat, ny * nz)
            iy, iz = np.divmod(rem, nz)
            v = self.origin + self.voxel_size * np.stack([ix, iy, iz], axis=-1)
            pc = T_CW.apply(v)
            z = pc[:, 2]
            front = z > 1e-6
            zs = np.where(front, z, 1.0)
            u = np.rint(K.fx * pc[:, 0] / zs + K.cx)
            r = np.rint(K.fy * pc[:, 1] / zs + K.cy)
            vis = front & (u >= 0) & (u < K.width) & (r >= 0) & (r < K.height)
            ui = np.where(vis, u, 0).astype(int)
            ri = np.where(vis, r, 0).astype(int)
            d = depth[ri, ui]
            ok = vis & np.isfinite(d) & (d > 0)
            if mask is not None:
                ok &= ~np.asarray(mask, dtype=bool)[ri, ui]
            sdf = np.where(ok, d - z, 0.0)
            ok &= sdf >= -self.truncation
            idx = flat[ok]
            tsdf = np.clip(sdf[ok] / self.truncation, -1.0, 1.0)
            w = wts[idx]
            vals[idx] = (w * vals[idx] + tsdf) / (w + 1.0)
            wts[idx] = w + 1.0
        self.values = vals.reshape(self.dims)
        self.weights = wts.reshape(self.dims)
        return self

    # io --------------------------------------------------------------------

    def header(self) -> dict:
        return {"origin": self.origin.tolist(), "voxel_size": self.voxel_size,
                "dims": list(self.dims), "truncation": self.truncation}

    def save(self, path):
        path = Path(path)
        data = (json.dumps(self.header()) + "\n").encode() \
            + self.values.astype("<f4").tobytes() + self.weights.astype("<f4").tobytes()
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as e:
            raise IoError(f"cannot write {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"volume file not found: {path}")
        raw = path.read_bytes()
        nl = raw.index(b"\n")
        hdr = json.loads(raw[:nl].decode())
        n = int(np.prod(hdr["dims"]))
        body = np.frombuffer(raw[nl + 1:], dtype="<f4")
        if body.size != 2 * n:
            raise DimensionMismatch(f"volume body has {body.size} floats, expected {2 * n}")
        return cls(hdr["origin"], float(hdr["voxel_size"]), hdr["dims"], float(hdr["truncation"]),
                   body[:n].astype(float), body[n:].astype(float))


def frustum_bounds(K: Intrinsics, T_WC: Pose, near: float, far: float):
    """Axis-aligned world box around the camera frustum between near and far."""
    corners = []
    for z in (near, far):
        for u in (-0.5, K.width - 0.5):
            for v in (-0.5, K.height - 0.5):
                corners.append([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    W = T_WC.apply(np.array(corners))
    return W.min(axis=0), W.max(axis=0)


def query(vol: TsdfVolume, p):
    return vol.query(p)


def query_gradient(vol: TsdfVolume, p):
    return vol.query_gradient(p)


def surface_normal_at(vol: TsdfVolume, p):
    return vol.surface_normal_at(p)


def fuse_frame(vol: TsdfVolume, depth, K, T_WC, mask=None):
    return vol.fuse_frame(depth, K, T_WC, mask)
