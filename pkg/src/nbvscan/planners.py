"""Baseline scan policies: circular ring sweeps and a uniform-random walk."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .camera import (DEC_PHI, DEC_PSI, INC_PHI, INC_THETA, PoseLimits, SphericalPose, apply_discrete_action,
                     pose_position)
from .env import EpisodeLog, ScanEnv

PLANNER_KINDS = ("circ1", "circ2", "circ3", "random")
CIRC_KINDS = PLANNER_KINDS[:3]
_TOL = 1e-9


class PlanError(ValueError):
    pass


def _level_index(levels: Sequence[float], value: float, what: str) -> int:
    for i, v in enumerate(levels):
        if abs(v - value) < 1e-6:
            return i
    raise PlanError(f"start {what} {value} is not on the discrete grid {list(levels)}")


def _ring_order(kind: str, start: int, n: int) -> list[int]:
    if kind == "circ1":
        return list(range(n - 1, -1, -1))
    if kind == "circ3":
        return list(range(n))
    # circ2: current ring, then downwards, then the rings above
    return [start] + list(range(start - 1, -1, -1)) + list(range(start + 1, n))


def plan_actions(kind: str, limits: PoseLimits, start: SphericalPose) -> list[int]:
    """Discrete action list for a circular baseline.

    Every ring is swept with a full turn of +theta moves at the closest
    distance; elevation changes happen where the previous sweep ended.
    circ1 climbs to the top ring before approaching, circ3 descends to the
    bottom ring before approaching, circ2 approaches first and sweeps its
    current ring before the others.
    """
    if kind not in CIRC_KINDS:
        raise PlanError(f"unknown circular planner {kind!r}; expected one of {CIRC_KINDS}")
    if not limits.contains(start):
        raise PlanError(f"start pose {start} violates the pose limits")
    phis, psis = limits.phi_levels, limits.psi_levels
    ring = _level_index(phis, start.phi, "elevation")
    dist = _level_index(psis, start.psi, "distance")
    order = _ring_order(kind, ring, len(phis))
    approach = [DEC_PSI] * dist
    n_sweep = len(limits.theta_levels)
    if abs(n_sweep * limits.d_theta - 360.0) > 1e-6:
        raise PlanError("azimuth step must divide 360 degrees")

    actions: list[int] = []
    if kind == "circ2":
        actions += approach
    else:
        first = order[0]
        actions += [INC_PHI if first > ring else DEC_PHI] * abs(first - ring)
        actions += approach
        ring = first
    for target in order:
        actions += [INC_PHI if target > ring else DEC_PHI] * abs(target - ring)
        ring = target
        actions += [INC_THETA] * n_sweep
    return actions


def approach_length(limits: PoseLimits, start: SphericalPose) -> int:
    """Number of radial moves a plan needs to reach the closest orbit."""
    return _level_index(limits.psi_levels, start.psi, "distance")


def simulate_plan(actions: Sequence[int], limits: PoseLimits, start: SphericalPose) -> tuple[list[SphericalPose], bool]:
    """Poses visited by a plan (start included) and whether any move clamped."""
    poses, clamped = [start], False
    for a in actions:
        p, c = apply_discrete_action(poses[-1], a, limits)
        poses.append(p)
        clamped |= c
    return poses, clamped


def closed_form_distance(actions: Sequence[int], limits: PoseLimits, start: SphericalPose) -> float:
    """Path length from per-move closed forms: radial |dpsi|, ring chords and elevation chords."""
    theta, phi, psi = start.theta, start.phi, start.psi
    total = 0.0
    for a in actions:
        if a in (0, 1):
            total += 2.0 * psi * math.cos(math.radians(phi)) * math.sin(math.radians(limits.d_theta) / 2.0)
        elif a in (2, 3):
            new = phi + (limits.d_phi if a == 2 else -limits.d_phi)
            if limits.phi_min - _TOL <= new <= limits.phi_max + _TOL:
                total += 2.0 * psi * math.sin(math.radians(limits.d_phi) / 2.0)
                phi = new
        else:
            new = psi + (limits.d_psi if a == 4 else -limits.d_psi)
            if limits.psi_min - _TOL <= new <= limits.psi_max + _TOL:
                total += abs(new - psi)
                psi = new
    return total


def random_actions(seed: int, n: int, n_actions: int = 6) -> list[int]:
    return np.random.default_rng(seed).integers(n_actions, size=n).tolist()


def run_planner(env: ScanEnv, plan: Sequence[int] | int) -> EpisodeLog:
    """Run a fixed plan, or a seeded uniform-random walk when given an int, until done or exhausted.

    The environment must already be reset.
    """
    if env.done:
        raise PlanError("environment must be reset before running a planner")
    if isinstance(plan, (int, np.integer)):
        rng = np.random.default_rng(int(plan))
        while not env.done:
            env.step(int(rng.integers(env.n_actions)))
        return env.log
    for a in plan:
        if env.done:
            break
        env.step(int(a))
    return env.log


def baseline_log(env: ScanEnv, kind: str, seed: int = 0) -> EpisodeLog:
    """Reset ``env`` and run one baseline of ``kind``."""
    env.reset()
    if kind == "random":
        return run_planner(env, seed)
    return run_planner(env, plan_actions(kind, env.config.limits, env.pose))


def camera_path(poses: Sequence[SphericalPose]) -> np.ndarray:
    return np.array([pose_position(p) for p in poses])
