"""Timing benchmark: lazy per-node assessment versus full-map pre-analysis.

Both contenders run the same planner code on identical (start, goal, seed)
triples. The baseline assesses every surface column up front and reads node
scores from that cache; the lazy planner fits planes only where it samples.
The full analysis of a fixture is timed once and charged to every trial.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .analyzer import TerrainAnalyzer
from .config import AppConfig
from .planner import PFRRTStar, PlanningError
from .terrain import GridMap3D, PointCloud, TerrainSpec, synthesize_terrain, voxelize

ALGORITHMS = ("pf_rrt_star", "rrt_star_analyse")
METRICS = ("analysis_s", "search_initial_s", "total_initial_s", "search_matched_s", "total_matched_s")


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    trials: int = Field(100, ge=1)
    max_iterations: int = Field(5000, ge=1, description="cap on iterations to the initial solution")
    refine_iterations: int = Field(300, ge=0, description="iterations after the initial solution")
    match_factor: float = Field(1.05, ge=1.0)
    workers: int = Field(1, ge=1)


@dataclass
class Fixture:
    name: str
    cloud: PointCloud
    grid: GridMap3D
    start: tuple[float, float]
    goal: tuple[float, float]

    @classmethod
    def from_spec(cls, spec: TerrainSpec, res: float) -> "Fixture":
        if spec.start is None or spec.goal is None:
            raise ValueError(f"fixture {spec.name!r} needs start and goal")
        cloud = synthesize_terrain(spec)
        return cls(spec.name, cloud, voxelize(cloud, res), tuple(spec.start), tuple(spec.goal))


def load_fixtures(directory, res: float) -> list[Fixture]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no fixture JSON files in {directory}")
    out = []
    for p in paths:
        spec = TerrainSpec.load(p)
        if spec.start is not None and spec.goal is not None:
            out.append(Fixture.from_spec(spec, res))
    return out


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    found: bool
    iterations_initial: int
    cost_initial: float
    cost_final: float
    plane_fits: int
    analysis_s: float
    search_initial_s: float
    search_matched_s: float
    trace: list[tuple[float, float]]  # (elapsed s, best cost)

    @property
    def total_initial_s(self) -> float:
        return self.analysis_s + self.search_initial_s

    @property
    def total_matched_s(self) -> float:
        return self.analysis_s + self.search_matched_s


def _run(analyzer: TerrainAnalyzer, fx: Fixture, app: AppConfig, bcfg: BenchConfig, seed: int,
         algorithm: str, analysis_s: float) -> RunRecord:
    cfg = app.planner.model_copy(update={"seed": seed, "max_iterations": bcfg.max_iterations})
    planner = PFRRTStar(analyzer, cfg)
    fits0 = analyzer.n_fits
    t0 = time.perf_counter()
    try:
        planner.reset(fx.start, fx.goal)
    except PlanningError:
        return RunRecord(algorithm, seed, False, 0, math.inf, math.inf, 0, analysis_s, math.nan, math.nan, [])
    planner.iterate(bcfg.max_iterations, stop_on_first=True)
    t_init = time.perf_counter() - t0
    if planner.tree.best_node is None:
        return RunRecord(algorithm, seed, False, planner.iteration, math.inf, math.inf,
                         analyzer.n_fits - fits0, analysis_s, math.nan, math.nan, [])
    it0 = planner.iteration
    cost0 = planner.best_cost
    planner.iterate(bcfg.refine_iterations)
    offset = planner._t0 - t0  # trace clock starts after reset()
    trace = [(offset + e.elapsed, e.cost) for e in planner.cost_trace]
    return RunRecord(algorithm, seed, True, it0, cost0, planner.best_cost, analyzer.n_fits - fits0,
                     analysis_s, t_init, math.nan, trace)


def _time_to(trace: list[tuple[float, float]], target: float) -> float:
    for elapsed, cost in trace:
        if cost <= target:
            return elapsed
    return math.nan


@dataclass
class TrialPair:
    fixture: str
    seed: int
    runs: dict[str, RunRecord]


def run_pair(fx: Fixture, full: TerrainAnalyzer, analysis_s: float, app: AppConfig, bcfg: BenchConfig,
             seed: int) -> TrialPair:
    lazy = TerrainAnalyzer(fx.grid, fx.cloud, app.assessment)
    runs = {
        "pf_rrt_star": _run(lazy, fx, app, bcfg, seed, "pf_rrt_star", 0.0),
        "rrt_star_analyse": _run(full, fx, app, bcfg, seed, "rrt_star_analyse", analysis_s),
    }
    assert runs["pf_rrt_star"].seed == runs["rrt_star_analyse"].seed, "trials must be paired"
    finals = [r.cost_final for r in runs.values() if r.found]
    if finals:
        target = bcfg.match_factor * min(finals)
        for r in runs.values():
            if r.found:
                r.search_matched_s = _time_to(r.trace, target)
    return TrialPair(fx.name, seed, runs)


def _summary(values: list[float], quartiles: bool) -> dict:
    v = np.array([x for x in values if math.isfinite(x)])
    if len(v) == 0:
        return {"median": None, "q1": None, "q3": None, "n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1) if quartiles else None,
            "q3": float(q3) if quartiles else None, "n": int(len(v))}


@dataclass
class BenchResult:
    fixtures: list[str]
    pairs: list[TrialPair]
    analysis_s: dict[str, float]
    trials: int

    def table(self) -> list[dict]:
        rows = []
        for name in self.fixtures:
            ps = [p for p in self.pairs if p.fixture == name]
            for alg in ALGORITHMS:
                recs = [p.runs[alg] for p in ps]
                row = {"fixture": name, "algorithm": alg, "trials": len(recs),
                       "found": sum(r.found for r in recs)}
                for m in METRICS:
                    row[m] = _summary([getattr(r, m) for r in recs], self.trials > 1)
                rows.append(row)
        return rows

    def medians(self, fixture: str, algorithm: str) -> dict[str, Optional[float]]:
        for row in self.table():
            if row["fixture"] == fixture and row["algorithm"] == algorithm:
                return {m: row[m]["median"] for m in METRICS}
        raise KeyError((fixture, algorithm))

    def to_dict(self, timing: bool = True) -> dict:
        trials = []
        for p in self.pairs:
            for alg, r in p.runs.items():
                d = asdict(r)
                d.pop("trace")
                if not timing:
                    for k in ("analysis_s", "search_initial_s", "search_matched_s"):
                        d.pop(k)
                trials.append({"fixture": p.fixture, **d})
        out = {"trials_per_fixture": self.trials, "fixtures": self.fixtures, "trials": trials}
        if timing:
            out["table"] = self.table()
        return out

    def write(self, json_path, csv_path=None) -> list[Path]:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(_finite(self.to_dict()), indent=2))
        written = [json_path]
        if csv_path is not None:
            with Path(csv_path).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["fixture", "algorithm", "trials", "found"]
                           + [f"{m}_{s}" for m in METRICS for s in ("median", "q1", "q3")])
                for row in self.table():
                    w.writerow([row["fixture"], row["algorithm"], row["trials"], row["found"]]
                               + [row[m][s] for m in METRICS for s in ("median", "q1", "q3")])
            written.append(Path(csv_path))
        return written


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


_CTX: dict = {}


def _init_worker(fx: Fixture, full: TerrainAnalyzer, analysis_s: float, app: AppConfig, bcfg: BenchConfig):
    _CTX.update(fx=fx, full=full, analysis_s=analysis_s, app=app, bcfg=bcfg)


def _worker_pair(seed: int) -> TrialPair:
    return run_pair(_CTX["fx"], _CTX["full"], _CTX["analysis_s"], _CTX["app"], _CTX["bcfg"], seed)


def bench_lazy_vs_full(fixtures: list[Fixture], trials: int, app: AppConfig,
                       bcfg: Optional[BenchConfig] = None, progress=None) -> BenchResult:
    """Paired trials per fixture; seeds are ``app.seed + i`` for trial i."""
    bcfg = (bcfg or BenchConfig()).model_copy(update={"trials": trials})
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pairs: list[TrialPair] = []
    analysis: dict[str, float] = {}
    for fx in fixtures:
        full = TerrainAnalyzer(fx.grid, fx.cloud, app.assessment, nodes_from_cache=True)
        analysis[fx.name] = full.analyze_all()
        seeds = [app.seed + i for i in range(trials)]
        if bcfg.workers > 1:
            with ProcessPoolExecutor(bcfg.workers, initializer=_init_worker,
                                     initargs=(fx, full, analysis[fx.name], app, bcfg)) as ex:
                pairs.extend(ex.map(_worker_pair, seeds))
        else:
            for s in seeds:
                pairs.append(run_pair(fx, full, analysis[fx.name], app, bcfg, s))
                if progress is not None:
                    progress(fx.name, s)
    return BenchResult([f.name for f in fixtures], pairs, analysis, trials)
