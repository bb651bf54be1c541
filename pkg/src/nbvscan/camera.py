"""Spherical camera poses, pose actions and the synthetic depth/gray sensor."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import RayAccel, facing_normals, raycast_batch

NO_HIT = 0.0
AMBIENT = 0.1
DEFAULT_LIGHT = (0.35, 0.25, -0.9)

# discrete action indices
INC_THETA, DEC_THETA, INC_PHI, DEC_PHI, INC_PSI, DEC_PSI = range(6)
ACTION_NAMES = ("+theta", "-theta", "+phi", "-phi", "+psi", "-psi")

_TOL = 1e-9


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class SphericalPose:
    theta: float  # azimuth, degrees in [0, 360)
    phi: float    # elevation, degrees
    psi: float    # distance to the look-at target

    def __post_init__(self):
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        object.__setattr__(self, "theta", wrap_degrees(self.theta))

    def key(self) -> tuple[float, float, float]:
        return (round(self.theta, 9), round(self.phi, 9), round(self.psi, 9))


def wrap_degrees(theta: float) -> float:
    t = math.fmod(float(theta), 360.0)
    if t < 0:
        t += 360.0
    if t >= 360.0 - 1e-9:
        t = 0.0
    return t


@dataclass(frozen=True)
class PoseLimits:
    phi_min: float = 10.0
    phi_max: float = 80.0
    psi_min: float = 100.0
    psi_max: float = 125.0
    d_theta: float = 45.0
    d_phi: float = 35.0
    d_psi: float = 25.0

    def __post_init__(self):
        if min(self.d_theta, self.d_phi, self.d_psi) <= 0:
            raise ValueError("step sizes must be positive")
        if self.phi_min > self.phi_max or self.psi_min > self.psi_max:
            raise ValueError("pose bounds are not ordered")
        if self.phi_max >= 90.0:
            raise ValueError("phi_max must stay below the zenith")
        if self.psi_min <= 0:
            raise ValueError("psi_min must be positive")

    @classmethod
    def discrete(cls, distance_levels: int = 2, azimuth_step: float = 45.0) -> "PoseLimits":
        """Three elevation levels {10, 45, 80}, distance levels from 100 in steps of 25."""
        return cls(10.0, 80.0, 100.0, 100.0 + 25.0 * (distance_levels - 1), azimuth_step, 35.0, 25.0)

    @property
    def phi_levels(self) -> list[float]:
        return _levels(self.phi_min, self.phi_max, self.d_phi)

    @property
    def psi_levels(self) -> list[float]:
        return _levels(self.psi_min, self.psi_max, self.d_psi)

    @property
    def theta_levels(self) -> list[float]:
        return [i * self.d_theta for i in range(int(round(360.0 / self.d_theta)))]

    @property
    def action_range(self) -> np.ndarray:
        return np.array([self.d_theta, self.d_phi, self.d_psi])

    def contains(self, pose: SphericalPose) -> bool:
        return (self.phi_min - _TOL <= pose.phi <= self.phi_max + _TOL
                and self.psi_min - _TOL <= pose.psi <= self.psi_max + _TOL)


def _levels(lo: float, hi: float, step: float) -> list[float]:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [lo + i * step for i in range(n + 1)]


@dataclass(frozen=True)
class CameraModel:
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0           # vertical field of view
    max_range: float = math.inf

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("camera images must be at least 16x16")
        if not 10.0 <= self.fov_deg <= 170.0:
            raise ValueError("fov must lie in [10, 170] degrees")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) / 2.0)


class Extrinsics(NamedTuple):
    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are right, up, forward."""
        return np.stack([self.right, self.up, self.forward])


def pose_position(pose: SphericalPose, target=(0.0, 0.0, 0.0)) -> np.ndarray:
    th, ph = math.radians(pose.theta), math.radians(pose.phi)
    return np.asarray(target, dtype=np.float64) + pose.psi * np.array(
        [math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """Camera at ``position`` facing ``target``; ``up`` must not be parallel to the view direction."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DegeneratePoseError("up vector is parallel to the viewing direction")
    right /= norm
    return Extrinsics(pos, right, np.cross(right, fwd), fwd)


def pose_to_camera(pose: SphericalPose, target=(0.0, 0.0, 0.0)) -> Extrinsics:
    """Camera on the sphere around ``target``, looking at it with world-up +z."""
    if abs(math.cos(math.radians(pose.phi))) < 1e-9:
        raise DegeneratePoseError(f"elevation {pose.phi} is at the zenith; look-at up vector undefined")
    return look_at(pose_position(pose, target), target)


def apply_discrete_action(pose: SphericalPose, action: int, limits: PoseLimits) -> tuple[SphericalPose, bool]:
    if not 0 <= int(action) < 6:
        raise ValueError(f"discrete action must be in 0..5, got {action}")
    action = int(action)
    theta, phi, psi = pose.theta, pose.phi, pose.psi
    if action == INC_THETA:
        return replace(pose, theta=theta + limits.d_theta), False
    if action == DEC_THETA:
        return replace(pose, theta=theta - limits.d_theta), False
    if action in (INC_PHI, DEC_PHI):
        new = phi + (limits.d_phi if action == INC_PHI else -limits.d_phi)
        if new > limits.phi_max + _TOL or new < limits.phi_min - _TOL:
            return pose, True
        return replace(pose, phi=min(max(new, limits.phi_min), limits.phi_max)), False
    new = psi + (limits.d_psi if action == INC_PSI else -limits.d_psi)
    if new > limits.psi_max + _TOL or new < limits.psi_min - _TOL:
        return pose, True
    return replace(pose, psi=min(max(new, limits.psi_min), limits.psi_max)), False


def apply_continuous_action(pose: SphericalPose, delta, limits: PoseLimits) -> tuple[SphericalPose, bool]:
    """Clip the delta to the action range, apply it, then clip to the pose bounds."""
    d = np.asarray(delta, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(d)):
        raise ValueError("continuous action must be finite")
    rng = limits.action_range
    dc = np.clip(d, -rng, rng)
    clipped = bool(np.any(dc != d))
    phi = pose.phi + dc[1]
    psi = pose.psi + dc[2]
    phi_c = min(max(phi, limits.phi_min), limits.phi_max)
    psi_c = min(max(psi, limits.psi_min), limits.psi_max)
    clipped = clipped or abs(phi_c - phi) > _TOL or abs(psi_c - psi) > _TOL
    return SphericalPose(pose.theta + dc[0], phi_c, psi_c), clipped


def chord_distance(a: SphericalPose, b: SphericalPose) -> float:
    return float(np.linalg.norm(pose_position(a) - pose_position(b)))


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def camera_rays(ext: Extrinsics, model: CameraModel) -> np.ndarray:
    """Unit ray directions through pixel centres, shape (height, width, 3)."""
    f = model.focal
    u = (np.arange(model.width) + 0.5 - 0.5 * model.width) / f
    v = (np.arange(model.height) + 0.5 - 0.5 * model.height) / f
    d = (ext.forward[None, None, :]
         + u[None, :, None] * ext.right[None, None, :]
         - v[:, None, None] * ext.up[None, None, :])
    return d / np.linalg.norm(d, axis=2, keepdims=True)


def _cast(scene: RayAccel | None, ext: Extrinsics, model: CameraModel):
    dirs = camera_rays(ext, model).reshape(-1, 3)
    if scene is None:
        return dirs, np.full(len(dirs), np.inf), np.full(len(dirs), -1, dtype=np.int64)
    origins = np.broadcast_to(ext.position, dirs.shape)
    t, face = raycast_batch(scene, origins, dirs)
    return dirs, t, face


def render_depth(scene: RayAccel | None, ext: Extrinsics, model: CameraModel) -> np.ndarray:
    """Z-depth image; misses and hits beyond ``max_range`` read ``NO_HIT``."""
    dirs, t, _ = _cast(scene, ext, model)
    z = t * (dirs @ ext.forward)
    valid = np.isfinite(z) & (z <= model.max_range)
    return np.where(valid, z, NO_HIT).reshape(model.height, model.width)


def render_gray(scene: RayAccel | None, ext: Extrinsics, model: CameraModel, light=DEFAULT_LIGHT) -> np.ndarray:
    """Lambertian shading plus ambient term, scaled by face albedo; background 0."""
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    dirs, t, face = _cast(scene, ext, model)
    hit = face >= 0
    img = np.zeros(len(dirs))
    if hit.any():
        n = facing_normals(scene, face[hit], dirs[hit])
        alb = scene.mesh.face_albedo[face[hit]]
        img[hit] = alb * (np.maximum(0.0, n @ -light) + AMBIENT)
    return np.clip(img, 0.0, 1.0).reshape(model.height, model.width)


def write_pgm(image: np.ndarray, path) -> None:
    """ASCII PGM (P2), 8-bit quantised."""
    q = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(int)
    h, w = q.shape
    rows = [" ".join(map(str, r)) for r in q.tolist()]
    Path(path).write_text(f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n", encoding="ascii")


def write_depth(depth: np.ndarray, path) -> None:
    """Rows and columns as little-endian uint32, then float32 depths row-major."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).astype(np.float64)
