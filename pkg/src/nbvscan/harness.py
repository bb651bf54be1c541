"""Experiment orchestration: baselines, policy training and evaluation, reports.

An experiment writes everything under its output directory:

    logs/...        one JSON-lines EpisodeLog per run
    clouds/...      reconstructed point clouds (PLY)
    curves/...      training curves and coverage-per-step series (CSV)
    checkpoints/... trained policies
    index.json      what was run and where its log lives
    report.json / report.txt
    manifest.json   every artifact with its SHA-256 and the config hash

Reports are rebuilt from ``index.json`` and the logs alone, so
``write_report`` on an existing directory reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .camera import PoseLimits
from .env import EnvConfig, EpisodeLog, MultiSceneEnv, RewardParams, ScanEnv, Scene, coverage_curve
from .geometry import Mesh, box_mesh, load_mesh, merge_meshes, write_ply
from .housegen import HouseSpec, generate_house, geometry_key, sample_spec, split_dataset
from .learn.trainer import TrainConfig, load_agent, run_greedy, train, write_curve_csv
from .planners import PLANNER_KINDS, baseline_log, plan_actions, run_planner

EXPERIMENT_KINDS = ("single_house", "multi_house", "non_house")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# --------------------------------------------------------------------------
# Experiment description
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    out: str
    name: str = "experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planners: tuple[str, ...] = ("circ1", "circ2", "circ3")
    house: Optional[dict] = None          # HouseSpec fields (single_house)
    mesh: Optional[str] = None            # mesh file instead of a generated target
    setups: tuple[tuple[int, float], ...] = ((2, 45.0),)   # (distance levels, azimuth step)
    house_count: int = 20                 # multi_house
    house_seed: int = 0
    splits: tuple[str, ...] = ("random",)
    test_fraction: float = 0.1
    random_episodes: int = 5              # seeds of the random baseline
    calibrate_coverage: Optional[float] = 90.0   # non_house max-range target, None to skip
    checkpoint: Optional[str] = None      # evaluate this policy instead of training
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        for p in self.planners:
            if p not in PLANNER_KINDS:
                raise ValueError(f"unknown planner {p!r}")
        if self.kind == "multi_house" and self.house_count < 2:
            raise ValueError("multi_house needs at least two houses")
        if not self.setups:
            raise ValueError("need at least one (distance levels, azimuth) setup")
        for path in (self.mesh, self.checkpoint):
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(path)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "out": self.out, "name": self.name, "env": self.env.to_dict(),
                "train": self.train.to_dict(), "planners": list(self.planners), "house": self.house,
                "mesh": self.mesh, "setups": [list(s) for s in self.setups], "house_count": self.house_count,
                "house_seed": self.house_seed, "splits": list(self.splits), "test_fraction": self.test_fraction,
                "random_episodes": self.random_episodes, "calibrate_coverage": self.calibrate_coverage,
                "checkpoint": self.checkpoint, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "env" in d:
            d["env"] = EnvConfig.from_dict(d["env"] or {})
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"] or {})
        for key in ("planners", "splits"):
            if key in d:
                d[key] = tuple(d[key])
        if "setups" in d:
            d["setups"] = tuple((int(a), float(b)) for a, b in d["setups"])
        if base is not None:
            for key in ("mesh", "checkpoint", "out"):
                if d.get(key) is not None and not Path(d[key]).is_absolute():
                    d[key] = str(base / d[key])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return ExperimentSpec.from_dict(data, base=path.parent)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class ReportTable:
    title: str
    columns: list[str]
    rows: list[list]

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": self.rows}

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        line = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [self.title, line(cells[0]), "  ".join("-" * w for w in widths)]
        out += [line(r) for r in cells[1:]]
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.1f}" if math.isfinite(v) else "-"
    return str(v)


def _under_roof_percent(scene: Scene, env: ScanEnv) -> float | None:
    mask = scene.under_roof
    if not mask.any():
        return None
    return 100.0 * float(env.covered[mask].sum()) / int(mask.sum())


def _read_log(out: Path, rel: str) -> EpisodeLog:
    return EpisodeLog.read(out / rel)


def build_report(out) -> list[ReportTable]:
    """Tables computed purely from ``index.json`` and the persisted logs."""
    out = Path(out)
    index = json.loads((out / "index.json").read_text(encoding="utf-8"))
    kind = index["kind"]
    if kind == "single_house":
        return [_single_house_table(out, index)]
    if kind == "multi_house":
        return [_multi_house_table(out, index)]
    return [_non_house_table(out, index)]


def _single_house_table(out: Path, index: dict) -> ReportTable:
    methods = index["methods"]
    cols = ["setup"]
    for m in methods:
        cols += [f"{m} steps", f"{m} dist", f"{m} solved", f"{m} under-roof %"]
    rows = []
    for setup in index["setups"]:
        row = [setup["label"]]
        for m in methods:
            run = setup["runs"][m]
            log = _read_log(out, run["log"])
            row += [log.steps, round(log.distance, 3), log.solved, run["under_roof"]]
        rows.append(row)
    return ReportTable(f"{index['name']}: steps and distance to terminal coverage", cols, rows)


def _multi_house_table(out: Path, index: dict) -> ReportTable:
    methods = index["methods"]
    cols = ["split", "set", "houses"] + [f"{m} solved" for m in methods]
    rows = []
    for entry in index["sets"]:
        row = [entry["split"], entry["set"], len(entry["houses"])]
        for m in methods:
            logs = [_read_log(out, h["logs"][m]) for h in entry["houses"]]
            row.append(round(sum(l.solved for l in logs) / len(logs), 4))
        rows.append(row)
    return ReportTable(f"{index['name']}: ratio of solved houses", cols, rows)


def _non_house_table(out: Path, index: dict) -> ReportTable:
    cols = ["method", "episodes", "median steps", "median dist", "final coverage %", "solved"]
    rows = []
    for m in index["methods"]:
        logs = [_read_log(out, rel) for rel in index["runs"][m]]
        rows.append([m, len(logs), float(np.median([l.steps for l in logs])),
                     round(float(np.median([l.distance for l in logs])), 3),
                     round(float(np.mean([l.coverage for l in logs])), 3),
                     round(sum(l.solved for l in logs) / len(logs), 4)])
    return ReportTable(f"{index['name']}: non-house target, max range {index['max_range']:.3f}", cols, rows)


def write_report(out) -> list[ReportTable]:
    out = Path(out)
    tables = build_report(out)
    (out / "report.json").write_text(json.dumps([t.to_dict() for t in tables], indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (out / "report.txt").write_text("\n".join(t.to_text() for t in tables), encoding="utf-8")
    index = json.loads((out / "index.json").read_text(encoding="utf-8"))
    if index["kind"] == "non_house":
        _write_coverage_csv(out, index)
    return tables


def _write_coverage_csv(out: Path, index: dict) -> None:
    methods = index["methods"]
    curves = {m: coverage_curve([_read_log(out, rel) for rel in index["runs"][m]]) for m in methods}
    n = max(len(c) for c in curves.values())
    lines = ["step," + ",".join(methods)]
    for t in range(n):
        vals = [repr(c[t] if t < len(c) else c[-1]) for c in (curves[m] for m in methods)]
        lines.append(f"{t + 1}," + ",".join(vals))
    (out / "curves").mkdir(exist_ok=True)
    (out / "curves" / "coverage_per_step.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_manifest(out, spec: ExperimentSpec) -> dict:
    out = Path(out)
    arts = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            data = p.read_bytes()
            arts.append({"path": p.relative_to(out).as_posix(), "bytes": len(data),
                         "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"config_hash": spec.config_hash(), "spec": spec.to_dict(), "artifacts": arts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# --------------------------------------------------------------------------
# Targets
# --------------------------------------------------------------------------

def sculpture_mesh() -> Mesh:
    """A non-house target: stepped plinth, off-centre column and a cantilevered arm."""
    parts = [box_mesh((-30, -24, 0), (30, 24, 8), 0.6),
             box_mesh((-14, -12, 8), (6, 12, 18), 0.75),
             box_mesh((-8, -6, 18), (4, 6, 62), 0.85),
             box_mesh((-26, -5, 50), (22, 5, 58), 0.5),
             box_mesh((14, -9, 30), (24, 9, 50), 0.7)]
    return merge_meshes(parts)


def _single_target(spec: ExperimentSpec) -> tuple[Mesh, str]:
    if spec.mesh is not None:
        return load_mesh(spec.mesh), Path(spec.mesh).stem
    if spec.kind == "non_house":
        return sculpture_mesh(), "sculpture"
    hs = HouseSpec.from_dict(spec.house) if spec.house else HouseSpec()
    return generate_house(hs), "house"


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------

def _policy(spec: ExperimentSpec, env, ckpt: Path, curve_csv: Path):
    if spec.checkpoint is not None:
        agent = load_agent(spec.checkpoint)
        agent.check_env(env)
        return agent
    res = train(env, spec.train, checkpoint=ckpt)
    write_curve_csv(res.curve, curve_csv)
    return res.agent


def _persist(out: Path, rel: str, log: EpisodeLog, env: ScanEnv | None = None) -> str:
    path = out / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    log.write(path)
    if env is not None:
        cloud = out / rel.replace("logs/", "clouds/", 1).replace(".jsonl", ".ply")
        cloud.parent.mkdir(parents=True, exist_ok=True)
        write_ply(env.recon, cloud)
    return rel


def _run_single_house(spec: ExperimentSpec, out: Path, stage: list) -> dict:
    mesh, name = _single_target(spec)
    methods = list(spec.planners) + ["policy"]
    index = {"kind": spec.kind, "name": spec.name, "target": name, "methods": methods, "setups": []}
    for levels, azimuth in spec.setups:
        label = f"{levels}lvl-{azimuth:g}deg"
        cfg = replace(spec.env, limits=PoseLimits.discrete(levels, azimuth), seed=spec.seed)
        stage[0] = f"{label}: scene"
        scene = Scene(mesh, cfg, name)
        env = ScanEnv(cfg, scene)
        runs = {}
        for kind in spec.planners:
            stage[0] = f"{label}: {kind}"
            log = baseline_log(env, kind, spec.seed)
            runs[kind] = {"log": _persist(out, f"logs/{label}/{kind}.jsonl", log, env),
                          "under_roof": _under_roof_percent(scene, env)}
        stage[0] = f"{label}: train"
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
        agent = _policy(spec, env, out / "checkpoints" / f"{label}.ckpt", out / "curves" / f"train-{label}.csv")
        stage[0] = f"{label}: evaluate"
        log = run_greedy(agent, env)
        runs["policy"] = {"log": _persist(out, f"logs/{label}/policy.jsonl", log, env),
                          "under_roof": _under_roof_percent(scene, env)}
        index["setups"].append({"label": label, "levels": levels, "azimuth": azimuth, "runs": runs})
    return index


def _run_multi_house(spec: ExperimentSpec, out: Path, stage: list) -> dict:
    stage[0] = "houses"
    specs = [sample_spec(spec.house_seed + i) for i in range(spec.house_count)]
    levels, azimuth = spec.setups[0]
    cfg = replace(spec.env, limits=PoseLimits.discrete(levels, azimuth), seed=spec.seed)
    scenes = [Scene(generate_house(s), cfg, f"house{spec.house_seed + i:04d}") for i, s in enumerate(specs)]
    methods = list(spec.planners) + ["policy"]
    index = {"kind": spec.kind, "name": spec.name, "methods": methods, "sets": [],
             "houses": {sc.name: {"spec": s.to_dict(), "geometry_key": list(map(str, geometry_key(s)))}
                        for sc, s in zip(scenes, specs)}}
    probe = ScanEnv(cfg, scenes[0])
    for mode in spec.splits:
        stage[0] = f"{mode}: split"
        split = split_dataset(specs, mode, spec.test_fraction, spec.seed)
        train_scenes = [scenes[i] for i in split.train_index]
        stage[0] = f"{mode}: train"
        env = MultiSceneEnv(cfg, train_scenes)
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
        agent = _policy(spec, env, out / "checkpoints" / f"{mode}.ckpt", out / "curves" / f"train-{mode}.csv")
        for set_name, idx in (("train", split.train_index), ("test", split.test_index)):
            stage[0] = f"{mode}: evaluate {set_name}"
            houses = []
            for i in idx:
                sc = scenes[i]
                logs = {}
                for kind in spec.planners:
                    probe.scene = sc
                    logs[kind] = _persist(out, f"logs/{mode}/{set_name}/{sc.name}/{kind}.jsonl",
                                          baseline_log(probe, kind, spec.seed))
                log = run_greedy(agent, env, sc)
                logs["policy"] = _persist(out, f"logs/{mode}/{set_name}/{sc.name}/policy.jsonl", log, env)
                houses.append({"name": sc.name, "logs": logs})
            index["sets"].append({"split": mode, "set": set_name, "houses": houses})
    return index


def full_sweep_coverage(scene: Scene, cfg: EnvConfig, max_range: float) -> float:
    """Coverage after a complete circ2 plan with terminal stopping disabled."""
    cam = replace(cfg.camera, max_range=max_range)
    c = replace(cfg, camera=cam, reward=replace(cfg.reward, terminal_coverage=100.0), max_steps=10**6)
    sc = Scene(scene.mesh, c, scene.name)
    env = ScanEnv(c, sc)
    env.reset()
    run_planner(env, plan_actions("circ2", c.limits, env.pose))
    return env.coverage


def calibrate_max_range(scene: Scene, cfg: EnvConfig, target: float, iterations: int = 12) -> float:
    """Bisect the depth range so a full circular sweep tops out near ``target`` percent coverage."""
    lo = max(cfg.limits.psi_min - scene.radius, 1e-3)
    hi = cfg.limits.psi_max + scene.radius
    if full_sweep_coverage(scene, cfg, hi) <= target:
        return hi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if full_sweep_coverage(scene, cfg, mid) > target:
            hi = mid
        else:
            lo = mid
    return lo


def _run_non_house(spec: ExperimentSpec, out: Path, stage: list) -> dict:
    mesh, name = _single_target(spec)
    levels, azimuth = spec.setups[0]
    cfg = replace(spec.env, limits=PoseLimits.discrete(levels, azimuth), seed=spec.seed)
    stage[0] = "calibrate"
    scene = Scene(mesh, cfg, name)
    max_range = spec.env.camera.max_range
    if spec.calibrate_coverage is not None:
        max_range = calibrate_max_range(scene, cfg, spec.calibrate_coverage)
    cfg = replace(cfg, camera=replace(cfg.camera, max_range=max_range))
    scene = Scene(mesh, cfg, name)
    env = ScanEnv(cfg, scene)
    methods = list(spec.planners) + ["policy"]
    runs: dict[str, list[str]] = {}
    for kind in spec.planners:
        stage[0] = kind
        seeds = range(spec.seed, spec.seed + spec.random_episodes) if kind == "random" else [spec.seed]
        runs[kind] = [_persist(out, f"logs/{kind}/episode-{s}.jsonl", baseline_log(env, kind, s), env)
                      for s in seeds]
    stage[0] = "train"
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    agent = _policy(spec, env, out / "checkpoints" / "policy.ckpt", out / "curves" / "train.csv")
    stage[0] = "evaluate"
    runs["policy"] = [_persist(out, "logs/policy/episode-0.jsonl", run_greedy(agent, env), env)]
    return {"kind": spec.kind, "name": spec.name, "target": name, "methods": methods, "runs": runs,
            "max_range": max_range if math.isfinite(max_range) else -1.0}


_RUNNERS = {"single_house": _run_single_house, "multi_house": _run_multi_house, "non_house": _run_non_house}


def run_experiment(spec: ExperimentSpec) -> list[ReportTable]:
    """Run every stage of ``spec`` and write its outputs; see the module docstring for the layout.

    On failure the outputs produced so far are kept, a manifest is still
    written, and an ExperimentError names the failing stage.
    """
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    stage = ["setup"]
    try:
        index = _RUNNERS[spec.kind](spec, out, stage)
        stage[0] = "report"
        (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tables = write_report(out)
    except Exception as exc:
        write_manifest(out, spec)
        raise ExperimentError(stage[0], exc) from exc
    write_manifest(out, spec)
    return tables


def experiment_env_config(levels: int = 2, azimuth: float = 45.0, terminal: float = 96.0, **kw) -> EnvConfig:
    return EnvConfig(limits=PoseLimits.discrete(levels, azimuth), reward=RewardParams(terminal_coverage=terminal),
                     **kw)


__all__ = ["EXPERIMENT_KINDS", "ExperimentError", "ExperimentSpec", "ReportTable", "build_report",
           "calibrate_max_range", "coverage_curve", "experiment_env_config", "full_sweep_coverage", "load_spec",
           "run_experiment", "sculpture_mesh", "write_manifest", "write_report"]
