"""Scanning environment: frame-stacked gray state, pose actions, coverage reward."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .camera import (DEFAULT_LIGHT, CameraModel, PoseLimits, SphericalPose, apply_continuous_action,
                     apply_discrete_action, pose_to_camera, render_depth, render_gray)
from .coverage import NnIndex, covered_mask
from .fusion import FusionParams, TsdfVolume, extract_points, integrate, new_volume
from .geometry import Aabb, Mesh, PointCloud, bounding_box, build_accel, sample_exposed_surface, sample_surface

STATE_SIZE = 84


class ConfigurationError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    k_c: float = 1.0
    k_x: float = 0.02
    step_penalty: float = 2.0
    terminal_bonus: float = 100.0
    terminal_coverage: float = 96.0

    def __post_init__(self):
        if not 0 < self.terminal_coverage <= 100:
            raise ValueError("terminal_coverage must lie in (0, 100]")


def step_reward(delta_coverage: float, dx: float, coverage: float, params: RewardParams) -> tuple[float, bool]:
    """Reward for one move and whether it reached terminal coverage."""
    if coverage > params.terminal_coverage:
        return params.terminal_bonus, True
    return params.k_c * delta_coverage - params.k_x * dx - params.step_penalty, False


@dataclass(frozen=True)
class EnvConfig:
    limits: PoseLimits = field(default_factory=PoseLimits.discrete)
    camera: CameraModel = field(default_factory=CameraModel)
    state_size: int = STATE_SIZE
    k: int = 5
    truncation_voxels: float = 3.0
    max_weight: float = 32.0
    voxels_per_diagonal: float = 128.0
    tau_fraction: float = 0.01
    reward: RewardParams = field(default_factory=RewardParams)
    max_steps: int = 50
    initial_pose: Optional[SphericalPose] = None
    seed: int = 0
    randomize_initial_azimuth: bool = False
    n_gt: int = 10_000
    exposed_gt: bool = True
    continuous: bool = False
    light: tuple[float, float, float] = DEFAULT_LIGHT

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")

    def start_pose(self) -> SphericalPose:
        if self.initial_pose is not None:
            return self.initial_pose
        levels = self.limits.phi_levels
        phi = 45.0 if any(abs(p - 45.0) < 1e-9 for p in levels) else levels[len(levels) // 2]
        return SphericalPose(0.0, phi, self.limits.psi_max)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.state_size, self.state_size, self.k + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"]["max_range"] = None if math.isinf(self.camera.max_range) else self.camera.max_range
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "limits" in d:
            lim = d["limits"]
            if "distance_levels" in lim or "azimuth_step" in lim:
                d["limits"] = PoseLimits.discrete(lim.get("distance_levels", 2), lim.get("azimuth_step", 45.0))
            else:
                d["limits"] = PoseLimits(**lim)
        if "camera" in d:
            cam = dict(d["camera"])
            if cam.get("max_range") is None:
                cam["max_range"] = math.inf
            d["camera"] = CameraModel(**cam)
        if "reward" in d:
            d["reward"] = RewardParams(**d["reward"])
        if d.get("initial_pose") is not None:
            d["initial_pose"] = SphericalPose(**d["initial_pose"])
        if "light" in d:
            d["light"] = tuple(d["light"])
        return cls(**d)


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's span."""
    if n_out == n_in:
        return np.eye(n_in)
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resize_area(image: np.ndarray, size: int = STATE_SIZE) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (size, size):
        return np.asarray(image, dtype=np.float64)
    return _area_matrix(size, h) @ image @ _area_matrix(size, w).T


def preprocess(frames: Sequence[np.ndarray], size: int = STATE_SIZE) -> np.ndarray:
    """Resize each frame to ``size`` x ``size`` and stack newest-first along the last axis."""
    if not len(frames):
        raise ValueError("need at least one frame")
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape:
            raise ValueError(f"frame shapes differ: {f.shape} vs {shape}")
    return np.stack([resize_area(f, size) for f in frames], axis=-1).astype(np.float32)


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0


# --------------------------------------------------------------------------
# Episode log
# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    theta: float
    phi: float
    psi: float
    action: Union[int, list]
    reward: float
    coverage: float
    dx: float
    clamped: bool

    def to_dict(self) -> dict:
        return {"t": self.t, "theta": self.theta, "phi": self.phi, "psi": self.psi, "action": self.action,
                "reward": self.reward, "coverage": self.coverage, "dx": self.dx, "clamped": self.clamped}


@dataclass
class EpisodeLog:
    records: list[StepRecord] = field(default_factory=list)
    initial_coverage: float = 0.0
    solved: bool = False

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def distance(self) -> float:
        return path_length(self)

    @property
    def coverage(self) -> float:
        return self.records[-1].coverage if self.records else self.initial_coverage

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    def summary(self) -> dict:
        return {"steps": self.steps, "distance": self.distance, "coverage": self.coverage, "solved": self.solved}

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict()) for r in self.records]
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        log = cls([StepRecord(**r) for r in rows if "t" in r])
        summary = [r for r in rows if "t" not in r]
        if summary:
            log.solved = bool(summary[-1]["solved"])
        return log


def path_length(log: EpisodeLog) -> float:
    """Sum of straight-line camera displacements between consecutive poses."""
    return float(math.fsum(r.dx for r in log.records))


def coverage_curve(logs: Sequence[EpisodeLog]) -> list[float]:
    """Mean coverage per step; finished episodes carry their final coverage forward."""
    if not logs:
        raise ValueError("need at least one log")
    n = max(log.steps for log in logs)
    cols = []
    for log in logs:
        cov = [r.coverage for r in log.records]
        cov += [log.coverage] * (n - len(cov))
        cols.append(cov)
    return np.mean(np.array(cols, dtype=np.float64), axis=0).tolist() if n else []


# --------------------------------------------------------------------------
# Scene and environment
# --------------------------------------------------------------------------

def prepare_target(mesh: Mesh) -> Mesh:
    """Translate so the bounding-box centre lies on the z-axis and the base sits on z=0."""
    box = bounding_box(mesh)
    c = box.center
    return mesh.translated((-c[0], -c[1], -box.min[2]))


class Scene:
    """Per-target precomputation shared by every environment scanning it.

    Holds the ray accelerator, ground-truth samples and a render cache keyed
    by pose; rendering is a pure function of the pose so cached frames are
    identical to fresh ones.
    """

    def __init__(self, mesh: Mesh, config: EnvConfig, name: str = "target", max_cache: int = 4096):
        self.name = name
        self.mesh = prepare_target(mesh)
        self.accel = build_accel(self.mesh)
        self.bounds: Aabb = self.accel.bounds
        self.target = self.bounds.center
        self.radius = float(np.linalg.norm(self.mesh.vertices - self.target, axis=1).max())
        if self.radius >= config.limits.psi_min:
            raise ConfigurationError(
                f"{name}: bounding radius {self.radius:.1f} reaches the closest orbit {config.limits.psi_min:g}")
        if config.exposed_gt:
            self.gt = sample_exposed_surface(self.mesh, config.n_gt, config.seed, self.accel)
        else:
            self.gt = sample_surface(self.mesh, config.n_gt, config.seed)
        self.gt_diagonal = float(np.linalg.norm(self.gt.points.max(axis=0) - self.gt.points.min(axis=0)))
        self.tau = config.tau_fraction * self.gt_diagonal
        self.voxel_size = self.bounds.diagonal / config.voxels_per_diagonal
        self.fusion = FusionParams.for_voxel(self.voxel_size, config.truncation_voxels, config.max_weight)
        self.depth_camera = config.camera
        self.gray_camera = CameraModel(config.state_size, config.state_size, config.camera.fov_deg)
        self.light = config.light
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._max_cache = max_cache

    @property
    def under_roof(self) -> np.ndarray:
        """Ground-truth samples on downward-facing surfaces above the ground."""
        return (self.gt.normals[:, 2] < -0.1) & (self.gt.points[:, 2] > 1e-6)

    def observe(self, pose: SphericalPose) -> tuple[np.ndarray, np.ndarray]:
        """Depth image and quantised gray state frame at ``pose``."""
        key = pose.key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        ext = pose_to_camera(pose, self.target)
        depth = render_depth(self.accel, ext, self.depth_camera)
        gray = quantize(render_gray(self.accel, ext, self.gray_camera, self.light))
        depth.setflags(write=False)
        gray.setflags(write=False)
        if len(self._cache) < self._max_cache:
            self._cache[key] = (depth, gray)
        return depth, gray

    def new_volume(self) -> TsdfVolume:
        return new_volume(self.bounds, self.voxel_size, self.fusion)


class ScanEnv:
    """One scan target, one camera; single-threaded."""

    def __init__(self, config: EnvConfig, target: Scene | Mesh):
        self.config = config
        self.scene = target if isinstance(target, Scene) else Scene(target, config)
        self.rng = np.random.default_rng(config.seed)
        self.done = True
        self.log = EpisodeLog()
        self.pose: SphericalPose = config.start_pose()
        self.volume: TsdfVolume | None = None
        self.covered = np.zeros(len(self.scene.gt), dtype=bool)
        self.recon = PointCloud(np.zeros((0, 3)))

    # action-space description used by the learners
    @property
    def n_actions(self) -> int:
        return 6

    @property
    def action_high(self) -> np.ndarray:
        return self.config.limits.action_range

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return self.config.state_shape

    @property
    def coverage(self) -> float:
        return 100.0 * float(self.covered.sum()) / len(self.covered)

    def _position(self, pose: SphericalPose) -> np.ndarray:
        return pose_to_camera(pose, self.scene.target).position

    def _state(self) -> np.ndarray:
        return np.stack(list(self.frames), axis=-1).astype(np.float32)

    def _fuse(self, pose: SphericalPose) -> np.ndarray:
        depth, gray = self.scene.observe(pose)
        integrate(self.volume, depth, pose_to_camera(pose, self.scene.target), self.scene.depth_camera)
        self.recon = extract_points(self.volume)
        todo = np.flatnonzero(~self.covered)
        if len(todo) and len(self.recon):
            index = NnIndex(self.recon)
            self.covered[todo[covered_mask(self.scene.gt.points[todo], index, self.scene.tau)]] = True
        return gray

    def reset(self, scene: Scene | None = None) -> tuple[np.ndarray, dict]:
        if scene is not None:
            self.scene = scene
        pose = self.config.start_pose()
        if self.config.randomize_initial_azimuth:
            levels = self.config.limits.theta_levels
            pose = replace(pose, theta=levels[int(self.rng.integers(len(levels)))])
        self.pose = pose
        self.volume = self.scene.new_volume()
        self.covered = np.zeros(len(self.scene.gt), dtype=bool)
        gray = self._fuse(pose)
        self.frames = deque([gray] * (self.config.k + 1), maxlen=self.config.k + 1)
        self.log = EpisodeLog(initial_coverage=self.coverage)
        self.done = False
        return self._state(), {"coverage": self.coverage, "pose": pose, "scene": self.scene.name}

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise EpisodeDoneError("episode finished; call reset()")
        limits = self.config.limits
        if self.config.continuous:
            new_pose, clamped = apply_continuous_action(self.pose, action, limits)
            logged_action = [float(a) for a in np.asarray(action, dtype=np.float64).reshape(3)]
        else:
            new_pose, clamped = apply_discrete_action(self.pose, int(action), limits)
            logged_action = int(action)
        dx = float(np.linalg.norm(self._position(new_pose) - self._position(self.pose)))
        before = self.coverage
        gray = self._fuse(new_pose)
        self.frames.appendleft(gray)
        self.pose = new_pose
        cov = self.coverage
        reward, terminal = step_reward(cov - before, dx, cov, self.config.reward)
        t = self.log.steps + 1
        self.log.records.append(StepRecord(t, new_pose.theta, new_pose.phi, new_pose.psi, logged_action,
                                           reward, cov, dx, clamped))
        truncated = not terminal and t >= self.config.max_steps
        self.done = terminal or truncated
        self.log.solved = terminal
        info = {"coverage": cov, "delta_coverage": cov - before, "dx": dx, "clamped": clamped,
                "terminal": terminal, "truncated": truncated, "pose": new_pose}
        return self._state(), reward, self.done, info


class MultiSceneEnv(ScanEnv):
    """Draws a scene uniformly at random at the start of every episode."""

    def __init__(self, config: EnvConfig, scenes: Sequence[Scene]):
        if not scenes:
            raise ConfigurationError("need at least one scene")
        super().__init__(config, scenes[0])
        self.scenes = list(scenes)

    def reset(self, scene: Scene | None = None) -> tuple[np.ndarray, dict]:
        if scene is None:
            scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        return super().reset(scene)
