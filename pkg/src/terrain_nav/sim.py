"""Closed-loop simulation: plan, densify, track, replan.

The world holds the ground-truth cloud and its voxel map. Sensing returns the
centres of columns within the sensing radius that have no surface or an
inadmissible traversability; those are the NMPC obstacles. The one-voxel pad
around the map is not sensed; it is the state bound of the tracker instead.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analyzer import TerrainAnalyzer
from .config import AppConfig
from .gpr import densify
from .nmpc import ControlInput, LogRow, RobotState, control_loop, dynamics_step, write_log_csv
from .planner import PFRRTStar, PlanningError, SparsePath, replan_heuristic
from .terrain import GridMap3D, PointCloud, voxelize


class SimWorld:
    def __init__(self, cloud: PointCloud, grid: GridMap3D, cfg: AppConfig,
                 robot: Optional[RobotState] = None, analyzer: Optional[TerrainAnalyzer] = None):
        self.cloud = cloud
        self.map = grid
        self.cfg = cfg
        self.analyzer = analyzer or TerrainAnalyzer(grid, cloud, cfg.assessment)
        self.robot = robot or RobotState(0.0, 0.0, 0.0)
        self.clock = 0.0
        self.sensing_radius = cfg.sim.sensing_radius
        self.tau_max = cfg.planner.tau_max_accept
        self.rng = np.random.default_rng(cfg.seed)
        r = int(math.ceil(self.sensing_radius / grid.res))
        ox, oy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        off = np.column_stack([ox.ravel(), oy.ravel()])
        keep = np.hypot(*(off * grid.res).T) <= self.sensing_radius + grid.res
        self._offsets = off[keep]

    @classmethod
    def from_cloud(cls, cloud: PointCloud, cfg: AppConfig) -> "SimWorld":
        return cls(cloud, voxelize(cloud, cfg.map.res), cfg)

    def xy_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Extent of the cloud's columns (the map minus its one-voxel pad)."""
        lo, hi = self.map.xy_bounds
        return lo + self.map.res, hi - self.map.res

    def sense_obstacles(self, limit: int) -> np.ndarray:
        """Nearest ``limit`` blocked column centres (2D) within the sensing radius."""
        p = np.array([self.robot.x, self.robot.y])
        cells = np.floor(p / self.map.res).astype(np.int64) - self.map.lattice_origin[:2] + self._offsets
        nx, ny, _ = self.map.dims
        # the pad ring is the map boundary, enforced as a state bound rather than sensed
        cells = cells[(cells[:, 0] >= 1) & (cells[:, 0] < nx - 1) & (cells[:, 1] >= 1) & (cells[:, 1] < ny - 1)]
        centres = (cells + self.map.lattice_origin[:2] + 0.5) * self.map.res
        d = np.linalg.norm(centres - p, axis=1)
        inside = d <= self.sensing_radius
        centres, d = centres[inside], d[inside]
        blocked = self.analyzer.taus_at(centres) >= self.tau_max
        centres, d = centres[blocked], d[blocked]
        order = np.argsort(d, kind="stable")[:limit]
        out = centres[order]
        if self.cfg.sim.sensing_noise > 0 and len(out):
            out = out + self.rng.normal(0.0, self.cfg.sim.sensing_noise, out.shape)
        return out

    def apply(self, u: ControlInput, dt: float) -> None:
        normal = self.analyzer.normal_at([self.robot.x, self.robot.y])
        self.robot = dynamics_step(self.robot, u, normal, dt)
        self.clock += dt


@dataclass
class RunReport:
    success: bool
    reason: str
    path_length: float
    elapsed: float
    min_clearance: float
    replans: int
    log: list[LogRow] = field(repr=False)
    analysis_time: float = 0.0
    search_time: float = 0.0
    control_time: float = 0.0
    diagnostics: list[str] = field(default_factory=list)
    final_state: Optional[RobotState] = None

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "success": self.success,
            "reason": self.reason,
            "path_length": self.path_length,
            "elapsed": self.elapsed,
            "min_clearance": self.min_clearance if math.isfinite(self.min_clearance) else None,
            "replans": self.replans,
            "steps": len(self.log),
            "diagnostics": self.diagnostics,
            "final_state": None if self.final_state is None else [
                self.final_state.x, self.final_state.y, self.final_state.theta],
        }
        if timing:
            d["timing"] = {"analysis_s": self.analysis_time, "search_s": self.search_time,
                           "control_s": self.control_time}
        return d

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        traj = out / "trajectory.csv"
        write_log_csv(self.log, traj)
        rep = out / "report.json"
        rep.write_text(json.dumps(self.to_dict(), indent=2))
        return [traj, rep]


def _travelled(log: list[LogRow], final: RobotState) -> float:
    if not log:
        return 0.0
    xy = np.array([[r.x, r.y] for r in log] + [[final.x, final.y]])
    return float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())


def run_episode(world: SimWorld, start2d, goal2d, cfg: AppConfig) -> RunReport:
    """Alternate global planning and NMPC tracking until the goal or a cap is hit."""
    start = np.asarray(start2d, dtype=float)
    goal = np.asarray(goal2d, dtype=float)
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0]) if np.any(goal != start) else 0.0
    world.robot = RobotState(float(start[0]), float(start[1]), heading)
    world.clock = 0.0
    log: list[LogRow] = []
    diag: list[str] = []
    prev: Optional[SparsePath] = None
    failures = 0
    replans = 0
    min_clear = math.inf
    t_search = t_control = 0.0
    steps_per_cycle = max(1, int(round(cfg.sim.replan_interval / cfg.nmpc.dt)))

    def report(success: bool, reason: str) -> RunReport:
        return RunReport(success, reason, _travelled(log, world.robot), world.clock, min_clear, replans, log,
                         0.0, t_search, t_control, diag, world.robot)

    while True:
        here = np.array([world.robot.x, world.robot.y])
        if np.linalg.norm(here - goal) <= cfg.sim.goal_tolerance:
            return report(True, "goal reached")
        if world.clock >= cfg.sim.max_sim_time:
            return report(False, "sim time cap reached")
        pcfg = cfg.planner_seeded.model_copy(update={"seed": cfg.seed + replans})
        if replans > 0:
            pcfg = pcfg.model_copy(update={"max_iterations": cfg.sim.replan_iterations})
        planner = PFRRTStar(world.analyzer, pcfg)
        t0 = time.perf_counter()
        path = None
        try:
            planner.reset(here, goal)
            replan_heuristic(planner, prev)
            planner.iterate(pcfg.max_iterations)
            path = planner.best_path()
        except PlanningError as e:
            diag.append(f"t={world.clock:.2f}: {e}")
        t_search += time.perf_counter() - t0
        replans += 1
        if path is None:
            failures += 1
            if not diag or not diag[-1].startswith(f"t={world.clock:.2f}"):
                diag.append(f"t={world.clock:.2f}: no path after {pcfg.max_iterations} iterations "
                            f"({len(planner.tree)} tree nodes)")
            if failures >= cfg.sim.max_plan_failures or prev is None:
                return report(False, "planning failed")
            path = prev
        else:
            failures = 0
        dense = densify(path, planner.tree, cfg.gpr, cfg.length_scale, seed=cfg.seed)
        t0 = time.perf_counter()
        res = control_loop(dense, world, cfg.nmpc, goal=goal, goal_tolerance=cfg.sim.goal_tolerance,
                           max_steps=steps_per_cycle)
        t_control += time.perf_counter() - t0
        log.extend(res.rows)
        min_clear = min(min_clear, res.min_clearance)
        prev = path
        if res.status == "infeasible":
            diag.append(f"t={world.clock:.2f}: tracking infeasible, safety stop")
            return report(False, "tracking infeasible")
