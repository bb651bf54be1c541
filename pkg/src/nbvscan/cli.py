"""Command-line entry point: ``nbvscan <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .env import EnvConfig, MultiSceneEnv, ScanEnv, Scene
from .fusion import write_volume
from .geometry import PointCloud, load_mesh, read_ply, sample_surface, save_mesh, write_ply
from .coverage import default_tau, surface_coverage
from .housegen import Vocabulary, generate_house, geometry_key, sample_spec
from .learn.trainer import TrainConfig, evaluate, load_agent, run_greedy, train, write_curve_csv
from .planners import PLANNER_KINDS, baseline_log


def _read_config(path) -> tuple[EnvConfig, TrainConfig, dict]:
    if path is None:
        return EnvConfig(), TrainConfig(), {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    unknown = set(data) - {"env", "train", "vocabulary"}
    if unknown:
        raise SystemExit(f"{path}: unknown sections {sorted(unknown)}")
    return EnvConfig.from_dict(data.get("env") or {}), TrainConfig.from_dict(data.get("train") or {}), data


def _house_files(folder) -> list[Path]:
    files = sorted(Path(folder).glob("*.obj"))
    if not files:
        raise SystemExit(f"no .obj meshes in {folder}")
    return files


def _scenes(folder, cfg: EnvConfig) -> list[Scene]:
    return [Scene(load_mesh(f), cfg, f.stem) for f in _house_files(folder)]


def cmd_housegen(args) -> None:
    _, _, data = _read_config(args.config)
    vocab = Vocabulary.from_dict(data["vocabulary"]) if data.get("vocabulary") else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for seed in range(args.seed, args.seed + args.count):
        spec = sample_spec(seed, vocab)
        save_mesh(generate_house(spec), out / f"house_{seed:05d}.obj")
        (out / f"house_{seed:05d}.json").write_text(json.dumps(spec.to_dict(), sort_keys=True) + "\n")
        lines.append(f"{seed}\t{json.dumps(list(geometry_key(spec)))}\t{spec.albedo_palette}")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.count} houses to {out}")


def cmd_baseline(args) -> None:
    cfg, _, _ = _read_config(args.config)
    env = ScanEnv(cfg, Scene(load_mesh(args.house), cfg, Path(args.house).stem))
    log = baseline_log(env, args.kind, args.seed)
    log.write(args.out)
    if args.cloud:
        write_ply(env.recon, args.cloud)
    print(json.dumps(log.summary()))


def cmd_train(args) -> None:
    cfg, tcfg, _ = _read_config(args.config)
    if args.steps is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "total_steps": args.steps})
    env = MultiSceneEnv(cfg, _scenes(args.houses, cfg))

    def show(row):
        if args.verbose:
            print(f"episode {row.episode}: reward {row.cumulative_reward:.2f} steps {row.steps} "
                  f"coverage {row.coverage:.1f}", flush=True)

    res = train(env, tcfg, checkpoint=args.out, resume=args.resume, on_episode=show)
    write_curve_csv(res.curve, args.curve or str(args.out) + ".curve.csv")
    print(f"trained {res.steps} steps, {len(res.curve)} episodes -> {args.out}")


def cmd_eval(args) -> None:
    cfg, _, _ = _read_config(args.config)
    scenes = _scenes(args.houses, cfg)
    env = MultiSceneEnv(cfg, scenes)
    result = evaluate(args.ckpt, env, scenes, log_dir=args.logs)
    report = result.to_dict()
    report["houses"] = [{"name": s.name, **l.summary()} for s, l in zip(scenes, result.logs)]
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"solved {result.solved_ratio:.3f} of {len(scenes)} houses")


def cmd_experiment(args) -> None:
    from .harness import ExperimentSpec, load_spec, run_experiment, write_report

    spec = load_spec(args.config)
    if args.out:
        spec = ExperimentSpec.from_dict({**spec.to_dict(), "out": args.out})
    if args.report_only:
        tables = write_report(spec.out)
    else:
        tables = run_experiment(spec)
    for t in tables:
        print(t.to_text())


def cmd_coverage(args) -> None:
    recon = read_ply(args.recon)
    if args.gt.endswith(".ply"):
        gt = read_ply(args.gt)
    else:
        gt = sample_surface(load_mesh(args.gt), args.samples, args.seed)
    diag = float(((gt.points.max(axis=0) - gt.points.min(axis=0)) ** 2).sum() ** 0.5)
    tau = args.tau if args.tau is not None else default_tau(diag)
    res = surface_coverage(gt, recon, tau)
    print(json.dumps({"coverage": res.coverage_percent, "n_obs": res.n_obs, "n_gt": res.n_gt, "tau": tau}))


def cmd_export(args) -> None:
    cfg, _, _ = _read_config(args.config)
    scene = Scene(load_mesh(args.house), cfg, Path(args.house).stem)
    env = ScanEnv(cfg, scene)
    if args.ckpt:
        log = run_greedy(load_agent(args.ckpt), env)
    else:
        log = baseline_log(env, args.kind, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(env.recon, out / "reconstruction.ply")
    write_ply(PointCloud(scene.gt.points), out / "ground_truth.ply")
    write_volume(env.volume, out / "volume.bin")
    log.write(out / "episode.jsonl")
    print(json.dumps(log.summary()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbvscan", description="Next-best-view scanning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("housegen", help="generate house meshes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="YAML file with an optional 'vocabulary' section")
    s.set_defaults(func=cmd_housegen)

    s = sub.add_parser("baseline", help="run one baseline planner on a mesh")
    s.add_argument("--kind", choices=PLANNER_KINDS, required=True)
    s.add_argument("--house", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="episode log (JSON lines)")
    s.add_argument("--cloud", help="optional PLY for the reconstruction")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("train", help="train a policy on a folder of meshes")
    s.add_argument("--config")
    s.add_argument("--houses", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="training curve CSV (default: <out>.curve.csv)")
    s.add_argument("--resume")
    s.add_argument("--steps", type=int)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--houses", required=True)
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--logs", help="directory for per-house episode logs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run an experiment spec")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--report-only", action="store_true", help="rebuild reports from existing logs")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("coverage", help="surface coverage of a reconstruction")
    s.add_argument("--gt", required=True, help="mesh (sampled) or PLY point cloud")
    s.add_argument("--recon", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("export", help="scan a mesh and export reconstruction, volume and log")
    s.add_argument("--house", required=True)
    s.add_argument("--config")
    s.add_argument("--kind", choices=PLANNER_KINDS, default="circ2")
    s.add_argument("--ckpt", help="use a trained policy instead of a baseline")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
