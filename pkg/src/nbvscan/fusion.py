"""Truncated signed distance fusion of depth images and zero-crossing extraction."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .camera import CameraModel, Extrinsics
from .geometry import Aabb, PointCloud

DEFAULT_MAX_VOXELS = 32_000_000


class VolumeTooLargeError(MemoryError):
    pass


@dataclass(frozen=True)
class FusionParams:
    truncation: float
    max_weight: float = 32.0

    def __post_init__(self):
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        if self.max_weight < 1:
            raise ValueError("max_weight must be >= 1")

    @classmethod
    def for_voxel(cls, voxel_size: float, truncation_voxels: float = 3.0, max_weight: float = 32.0) -> "FusionParams":
        return cls(truncation_voxels * voxel_size, max_weight)


@dataclass(eq=False)
class TsdfVolume:
    origin: np.ndarray      # centre of voxel (0, 0, 0)
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray
    weight: np.ndarray
    params: FusionParams

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.tsdf.copy(),
                          self.weight.copy(), self.params)


def new_volume(bounds: Aabb, voxel_size: float, params: FusionParams,
               max_voxels: int = DEFAULT_MAX_VOXELS) -> TsdfVolume:
    """Empty volume covering ``bounds`` inflated by the truncation distance."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    ext = bounds.extent
    if np.any(ext <= 0):
        raise ValueError("bounds must have positive extent on every axis")
    if params.truncation < 2 * voxel_size - 1e-12:
        raise ValueError("truncation must be at least two voxels")
    # the half-voxel shift keeps voxel centres off the bounding faces, where the sign is ambiguous
    lo = np.array(bounds.min) - params.truncation - 0.5 * voxel_size
    hi = np.array(bounds.max) + params.truncation
    dims = tuple(int(max(2, math.ceil((h - l) / voxel_size - 1e-9) + 1)) for l, h in zip(lo, hi))
    n = dims[0] * dims[1] * dims[2]
    if n > max_voxels:
        raise VolumeTooLargeError(
            f"volume {dims} needs {n} voxels (~{n * 12 / 2**20:.0f} MiB), cap is {max_voxels}")
    return TsdfVolume(lo, float(voxel_size), dims, np.ones(dims), np.zeros(dims), params)


@numba.njit(cache=True)
def _integrate(tsdf, weight, origin, vs, rot, pos, depth, focal, cx, cy, trunc, max_w):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    for i in range(nx):
        px = origin[0] + i * vs - pos[0]
        for j in range(ny):
            py = origin[1] + j * vs - pos[1]
            for k in range(nz):
                pz = origin[2] + k * vs - pos[2]
                z = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz
                if z <= 0.0:
                    continue
                x = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz
                y = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz
                uc = cx + focal * x / z
                vc = cy - focal * y / z
                if uc < 0.0 or vc < 0.0:
                    continue
                col = int(uc)
                row = int(vc)
                if col >= w or row >= h:
                    continue
                d = depth[row, col]
                if d <= 0.0:
                    continue
                sdf = d - z
                if sdf <= -trunc:
                    continue
                val = min(1.0, sdf / trunc)
                w0 = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w0 + val) / (w0 + 1.0)
                weight[i, j, k] = min(w0 + 1.0, max_w)


def integrate(volume: TsdfVolume, depth: np.ndarray, ext: Extrinsics, model: CameraModel) -> TsdfVolume:
    """Fuse one z-depth image in place (and return the volume)."""
    if depth.shape != (model.height, model.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera {model.height}x{model.width}")
    _integrate(volume.tsdf, volume.weight, np.asarray(volume.origin, dtype=np.float64), volume.voxel_size,
               ext.rotation, np.asarray(ext.position, dtype=np.float64),
               np.ascontiguousarray(depth, dtype=np.float64), model.focal,
               0.5 * model.width, 0.5 * model.height, volume.params.truncation, volume.params.max_weight)
    return volume


@numba.njit(cache=True)
def _crossings(tsdf, weight):
    nx, ny, nz = tsdf.shape
    out = np.empty((3 * nx * ny * nz, 3))
    n = 0
    for axis in range(3):
        di = 1 if axis == 0 else 0
        dj = 1 if axis == 1 else 0
        dk = 1 if axis == 2 else 0
        for i in range(nx - di):
            for j in range(ny - dj):
                for k in range(nz - dk):
                    if weight[i, j, k] <= 0.0 or weight[i + di, j + dj, k + dk] <= 0.0:
                        continue
                    lo = tsdf[i, j, k]
                    hi = tsdf[i + di, j + dj, k + dk]
                    if (lo >= 0.0) == (hi >= 0.0):
                        continue
                    f = lo / (lo - hi)
                    out[n, 0] = i + f * di
                    out[n, 1] = j + f * dj
                    out[n, 2] = k + f * dk
                    n += 1
    return out[:n]


def extract_points(volume: TsdfVolume) -> PointCloud:
    """Interpolated zero crossings between axis-neighbours that are both observed.

    Ordered by axis, then by voxel index in C order.
    """
    idx = _crossings(volume.tsdf, volume.weight)
    return PointCloud(volume.origin + idx * volume.voxel_size)


def write_volume(volume: TsdfVolume, path) -> None:
    """dims (3 x int32), origin (3 x float64), voxel size (float64), tsdf then weight (float32, C order)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *volume.dims))
        fh.write(struct.pack("<3d", *map(float, volume.origin)))
        fh.write(struct.pack("<d", volume.voxel_size))
        fh.write(volume.tsdf.astype("<f4").tobytes())
        fh.write(volume.weight.astype("<f4").tobytes())


def read_volume(path, params: FusionParams | None = None) -> TsdfVolume:
    raw = Path(path).read_bytes()
    dims = struct.unpack("<3i", raw[:12])
    origin = np.array(struct.unpack("<3d", raw[12:36]))
    vs = struct.unpack("<d", raw[36:44])[0]
    n = dims[0] * dims[1] * dims[2]
    arr = np.frombuffer(raw[44:], dtype="<f4")
    tsdf = arr[:n].reshape(dims).astype(np.float64)
    weight = arr[n:2 * n].reshape(dims).astype(np.float64)
    return TsdfVolume(origin, vs, tuple(dims), tsdf, weight, params or FusionParams.for_voxel(vs))
