"""Command-line entry point: gen-terrain, plan, simulate, bench.

Exit codes: 0 success, 1 domain failure (no path, failed episode), 2 usage or
config error. Every command writes into --out together with manifest.json,
which lists the produced files and the resolved config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .bench import BenchConfig, bench_lazy_vs_full, load_fixtures
from .config import AppConfig
from .gpr import densify
from .planner import PlanningError, plan
from .sim import SimWorld, run_episode
from .terrain import (PointCloud, TerrainError, TerrainSpec, load_point_cloud, synthesize_terrain, voxelize,
                      write_point_cloud)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(args) -> AppConfig:
    cfg = AppConfig.load(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "no_traversability_weight", False):
        updates["nmpc.use_traversability_weight"] = False
    if getattr(args, "iterations", None) is not None:
        updates["planner.max_iterations"] = args.iterations
    return cfg.with_overrides(updates) if updates else cfg


def _load_map(path: str) -> tuple[PointCloud, Optional[TerrainSpec]]:
    """A point cloud file, or a terrain spec JSON synthesised on the fly."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        spec = TerrainSpec.load(p)
        return synthesize_terrain(spec), spec
    return load_point_cloud(p), None


def _endpoints(args, spec: Optional[TerrainSpec]):
    start = args.start if args.start is not None else (spec.start if spec else None)
    goal = args.goal if args.goal is not None else (spec.goal if spec else None)
    if start is None or goal is None:
        raise UsageError("--start and --goal are required unless the map is a terrain spec that defines them")
    return tuple(start), tuple(goal)


def _manifest(out: Path, command: str, files: list[Path], cfg: Optional[AppConfig], extra: dict) -> None:
    doc = {
        "command": command,
        "files": sorted(str(f.relative_to(out)) for f in files),
        "config": cfg.model_dump(mode="json") if cfg is not None else None,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def cmd_gen_terrain(args) -> int:
    spec = TerrainSpec.load(args.spec)
    cloud = synthesize_terrain(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{spec.name}.{args.format}"
    write_point_cloud(target, cloud, args.format)
    _manifest(out, "gen-terrain", [target], None, {"spec": spec.model_dump(mode="json"), "points": len(cloud)})
    print(f"wrote {len(cloud)} points to {target}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    cloud, spec = _load_map(args.map)
    start, goal = _endpoints(args, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = voxelize(cloud, cfg.map.res)
    files = []
    try:
        path, tree = plan(grid, cloud, start, goal, cfg.planner_seeded, cfg.assessment)
    except PlanningError as e:
        print(f"planning failed: {e}", file=sys.stderr)
        _manifest(out, "plan", files, cfg, {"start": start, "goal": goal, "found": False})
        return EXIT_FAIL
    tree_file = out / "tree.json"
    tree_file.write_text(json.dumps(tree.to_dict()))
    files.append(tree_file)
    if path is not None:
        path_file = out / "sparse_path.json"
        path_file.write_text(json.dumps(path.to_dict(), indent=2))
        dense = densify(path, tree, cfg.gpr, cfg.length_scale, seed=cfg.seed)
        dense_file = out / "dense_path.csv"
        dense.write_csv(dense_file)
        files += [path_file, dense_file]
    _manifest(out, "plan", files, cfg, {"start": start, "goal": goal, "found": path is not None})
    if path is None:
        print(f"no path found after {cfg.planner.max_iterations} iterations ({len(tree)} tree nodes)",
              file=sys.stderr)
        return EXIT_FAIL
    print(f"path with {len(path.nodes)} nodes, cost {path.cost:.3f}, length {path.length:.3f} m")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    cloud, spec = _load_map(args.map)
    start, goal = _endpoints(args, spec)
    out = Path(args.out)
    world = SimWorld.from_cloud(cloud, cfg)
    report = run_episode(world, start, goal, cfg)
    files = report.write(out)
    _manifest(out, "simulate", files, cfg, {"start": start, "goal": goal, "success": report.success})
    print(f"{report.reason}: {len(report.log)} steps, {report.elapsed:.2f} s sim time, "
          f"travelled {report.path_length:.2f} m")
    if not report.success:
        for line in report.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    cfg = _load_config(args)
    bcfg = BenchConfig(trials=args.trials, workers=args.workers, refine_iterations=args.refine_iterations)
    fixtures = load_fixtures(args.fixtures, cfg.map.res)
    result = bench_lazy_vs_full(fixtures, args.trials, cfg, bcfg)
    out = Path(args.out)
    files = result.write(out / "bench.json", out / "bench.csv")
    stable = out / "bench_trials.json"
    stable.write_text(json.dumps(result.to_dict(timing=False), indent=2, sort_keys=True, default=str))
    files.append(stable)
    _manifest(out, "bench", files, cfg, {"bench": bcfg.model_dump(mode="json"),
                                         "fixtures": result.fixtures})
    for row in result.table():
        t = row["total_initial_s"]["median"]
        s = row["search_initial_s"]["median"]
        print(f"{row['fixture']:>12} {row['algorithm']:>16} found {row['found']}/{row['trials']} "
              f"total {t if t is None else round(t, 4)} s search {s if s is None else round(s, 4)} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="terrain-nav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-terrain", help="synthesise a point cloud from a terrain spec")
    g.add_argument("spec")
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=("xyz", "pcd"), default="xyz")
    g.set_defaults(func=cmd_gen_terrain)

    def common(p):
        p.add_argument("map", help="point cloud (.xyz/.pcd) or terrain spec (.json)")
        p.add_argument("--start", nargs=2, type=float, metavar=("X", "Y"))
        p.add_argument("--goal", nargs=2, type=float, metavar=("X", "Y"))
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("plan", help="plan a global path and densify it")
    common(p)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="closed-loop episode: plan, densify, track")
    common(s)
    s.add_argument("--no-traversability-weight", action="store_true",
                   help="force the control-cost coefficient to 1")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="lazy vs full-analysis timing benchmark")
    b.add_argument("fixtures", help="directory of terrain spec JSON files with start/goal")
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--refine-iterations", type=int, default=300)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: invalid input\n{e}", file=sys.stderr)
    except (TerrainError, FileNotFoundError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
