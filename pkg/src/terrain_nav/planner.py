"""Plane-fitting RRT* over surface nodes.

Sampling and steering are 2D; every new point is projected onto the terrain
surface, a local plane is fitted there and the node is admitted only when its
traversability is below ``tau_max_accept``. Neighbour search, parent choice and
rewiring work in 3D with the traversability-weighted edge cost. Once a solution
exists, samples are drawn from the informed ellipse.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .analyzer import TerrainAnalyzer
from .assessment import AssessmentConfig, LocalPlane
from .terrain import GridMap3D, PointCloud


class PlanningError(ValueError):
    """Start or goal cannot be turned into an admissible node."""


class PlannerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    step: float = Field(0.4, gt=0, description="2D steer length (m)")
    neighbor_radius: float = Field(0.49, gt=0)
    goal_region_radius: float = Field(0.3, gt=0)
    max_iterations: int = Field(2000, ge=0)
    omega: float = Field(0.5, ge=0)
    tau_max_accept: float = Field(0.8, gt=0, le=1)
    seed: int = 0
    goal_sample_every: int = Field(50, ge=1)
    debug_checks: bool = False


@dataclass(frozen=True)
class PlaneNode:
    id: int
    plane: LocalPlane
    tau: float
    parent: Optional[int]
    cost_from_root: float
    children: tuple[int, ...] = ()

    @property
    def position(self) -> np.ndarray:
        return self.plane.center


@dataclass
class SparsePath:
    nodes: list[PlaneNode]
    cost: float

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes]).reshape(-1, 3)

    @property
    def length(self) -> float:
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())

    def to_dict(self) -> dict:
        return {"cost": self.cost, "length": self.length, "nodes": [_node_dict(n) for n in self.nodes]}


def _node_dict(n: PlaneNode) -> dict:
    return {
        "id": n.id,
        "position": n.position.tolist(),
        "rotation": n.plane.rotation.tolist(),
        "tau": n.tau,
        "parent": n.parent,
        "cost": n.cost_from_root,
    }


def edge_costs(tau_a, tau_b, length, omega: float):
    """Traversability-weighted edge cost; inf where either tau >= 1."""
    tau_a = np.asarray(tau_a, dtype=float)
    tau_b = np.asarray(tau_b, dtype=float)
    with np.errstate(divide="ignore"):
        pen = np.where((tau_a < 1) & (tau_b < 1),
                       1.0 / np.maximum(1 - tau_a, 0) + 1.0 / np.maximum(1 - tau_b, 0) - 2.0, np.inf)
    if omega == 0:
        pen = np.where(np.isinf(pen), np.inf, 0.0)
    with np.errstate(invalid="ignore"):
        cost = (1.0 + omega * pen) * np.asarray(length, dtype=float)
    return np.where(np.isinf(pen), np.inf, cost)


def edge_cost(a: PlaneNode, b: PlaneNode, omega: float) -> float:
    length = float(np.linalg.norm(a.position - b.position))
    return float(edge_costs(a.tau, b.tau, length, omega))


class SamplingTree:
    """Array-backed RRT* tree rooted at node 0."""

    def __init__(self, capacity: int = 1024):
        self.pos = np.empty((capacity, 3))
        self.tau = np.empty(capacity)
        self.cost = np.empty(capacity)
        self.parent = np.empty(capacity, dtype=np.int64)
        self.planes: list[LocalPlane] = []
        self.children: list[list[int]] = []
        self.n = 0
        self.root = 0
        self.goal_nodes: list[int] = []
        self.best_node: Optional[int] = None
        self.best_path: Optional[SparsePath] = None

    def __len__(self) -> int:
        return self.n

    def _grow(self):
        cap = 2 * len(self.tau)
        for name in ("pos", "tau", "cost", "parent"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self.n] = old[: self.n]
            setattr(self, name, new)

    def add(self, plane: LocalPlane, tau: float, parent: int, cost: float) -> int:
        if self.n == len(self.tau):
            self._grow()
        i = self.n
        self.pos[i] = plane.center
        self.tau[i] = tau
        self.cost[i] = cost
        self.parent[i] = parent
        self.planes.append(plane)
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def reparent(self, i: int, new_parent: int, new_cost: float) -> None:
        old = int(self.parent[i])
        self.children[old].remove(i)
        self.children[new_parent].append(i)
        self.parent[i] = new_parent
        delta = new_cost - self.cost[i]
        stack = [i]
        while stack:
            j = stack.pop()
            self.cost[j] += delta
            stack.extend(self.children[j])

    def node(self, i: int) -> PlaneNode:
        p = int(self.parent[i])
        return PlaneNode(i, self.planes[i], float(self.tau[i]), None if p < 0 else p,
                         float(self.cost[i]), tuple(self.children[i]))

    @property
    def nodes(self) -> list[PlaneNode]:
        return [self.node(i) for i in range(self.n)]

    @property
    def positions(self) -> np.ndarray:
        return self.pos[: self.n]

    @property
    def taus(self) -> np.ndarray:
        return self.tau[: self.n]

    def path_ids(self, i: int) -> list[int]:
        ids = []
        while i >= 0:
            ids.append(i)
            i = int(self.parent[i])
        return ids[::-1]

    def path_to(self, i: int) -> SparsePath:
        return SparsePath([self.node(j) for j in self.path_ids(i)], float(self.cost[i]))

    def check_invariants(self, omega: float, atol: float = 1e-9) -> None:
        """Assert single-rooted acyclic structure and cost consistency."""
        assert self.parent[self.root] == -1
        seen = np.zeros(self.n, dtype=bool)
        stack = [self.root]
        while stack:
            j = stack.pop()
            assert not seen[j], "cycle in tree"
            seen[j] = True
            for c in self.children[j]:
                assert self.parent[c] == j
                l = np.linalg.norm(self.pos[c] - self.pos[j])
                expect = self.cost[j] + float(edge_costs(self.tau[j], self.tau[c], l, omega))
                assert abs(self.cost[c] - expect) <= atol * max(1.0, expect), "cost inconsistency"
                stack.append(c)
        assert seen.all(), "unreachable nodes"

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "goal_nodes": list(self.goal_nodes),
            "nodes": [_node_dict(n) for n in self.nodes],
        }


def sample_ellipsoid(start2d, goal2d, c_best: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the ellipse with foci start/goal and major axis c_best."""
    start2d = np.asarray(start2d, dtype=float)
    goal2d = np.asarray(goal2d, dtype=float)
    d = goal2d - start2d
    c_min = float(np.hypot(*d))
    c_best = max(float(c_best), c_min)
    a = c_best / 2.0
    b = math.sqrt(max(c_best * c_best - c_min * c_min, 0.0)) / 2.0
    r = math.sqrt(rng.random())
    phi = 2 * math.pi * rng.random()
    local = np.array([a * r * math.cos(phi), b * r * math.sin(phi)])
    ang = math.atan2(d[1], d[0])
    c, s = math.cos(ang), math.sin(ang)
    return (start2d + goal2d) / 2.0 + np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])


@dataclass
class CostEvent:
    iteration: int
    elapsed: float
    cost: float


class PFRRTStar:
    """Stateful planner; one instance owns one tree."""

    def __init__(self, analyzer: TerrainAnalyzer, cfg: PlannerConfig):
        self.analyzer = analyzer
        self.cfg = cfg
        self.map = analyzer.map
        self.tree = SamplingTree()
        self.iteration = 0
        self.cost_trace: list[CostEvent] = []
        self.best_cost = math.inf
        self._t0 = time.perf_counter()

    # -- setup ---------------------------------------------------------------------

    def reset(self, start2d, goal2d) -> None:
        self.start = np.asarray(start2d, dtype=float)[:2]
        self.goal = np.asarray(goal2d, dtype=float)[:2]
        hint = np.append(self.goal - self.start, 0.0)
        if not np.any(hint):
            hint = np.array([1.0, 0.0, 0.0])
        for name, xy in (("goal", self.goal), ("start", self.start)):
            where = f"({xy[0]:g}, {xy[1]:g})"
            if not self.map.in_bounds_xy(xy):
                raise PlanningError(f"{name} {where} is outside the map")
            res = self.analyzer.node_at(xy, hint)
            if res is None:
                raise PlanningError(f"{name} {where} does not project to a fittable surface")
            _, plane, tau = res
            if tau >= self.cfg.tau_max_accept:
                raise PlanningError(f"{name} {where} is not traversable (tau={tau:.3f})")
        self.tree = SamplingTree()
        self.tree.add(plane, tau, -1, 0.0)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.lo, self.hi = self.map.xy_bounds
        self.iteration = 0
        self.cost_trace = []
        self.best_cost = math.inf
        self._t0 = time.perf_counter()
        if np.hypot(*(self.start - self.goal)) <= self.cfg.goal_region_radius:
            self.tree.goal_nodes.append(0)
        self._update_best()

    # -- primitives ---------------------------------------------------------------

    def segment_free(self, a2: np.ndarray, b2: np.ndarray) -> bool:
        """Every surface sample spaced ``res`` along the open segment is admissible."""
        d = b2 - a2
        m = int(math.ceil(math.hypot(d[0], d[1]) / self.map.res))
        if m <= 1:
            return True
        t = np.arange(1, m) / m
        pts = a2 + t[:, None] * d
        return bool(np.all(self.analyzer.taus_at(pts) < self.cfg.tau_max_accept))

    def _sample(self) -> np.ndarray:
        if self.iteration % self.cfg.goal_sample_every == 0:
            return self.goal
        if self.tree.best_node is not None:
            c_best = self._path_length(self.tree.best_node)
            return sample_ellipsoid(self.start, self.goal, c_best, self.rng)
        return self.lo + self.rng.random(2) * (self.hi - self.lo)

    def _path_length(self, i: int) -> float:
        ids = self.tree.path_ids(i)
        p = self.tree.pos[ids]
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())

    def extend_toward(self, x_rand) -> Optional[int]:
        """One RRT* insertion toward ``x_rand``; returns the new node id or None."""
        tree, cfg = self.tree, self.cfg
        n = tree.n
        pos = tree.pos[:n]
        d2 = pos[:, :2] - x_rand
        i_near = int(np.argmin(np.einsum("ij,ij->i", d2, d2)))
        x_near = pos[i_near, :2]
        delta = x_rand - x_near
        dist = math.hypot(delta[0], delta[1])
        if dist < 1e-9:
            return None
        x_new = np.array(x_rand, dtype=float) if dist <= cfg.step else x_near + delta * (cfg.step / dist)
        if not self.map.in_bounds_xy(x_new):
            return None
        sp = self.map.project_to_surface(x_new)
        if sp is None:
            return None
        hint = sp.position - pos[i_near]
        if not np.any(hint):
            return None
        fitted = self.analyzer.plane_for(sp, hint)
        if fitted is None:
            return None
        plane, tau_new = fitted
        if tau_new >= cfg.tau_max_accept:
            return None
        p_new = sp.position
        diff = pos - p_new
        d3 = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        near = np.flatnonzero(d3 <= cfg.neighbor_radius)
        if len(near) == 0:
            return None
        e = edge_costs(tree.tau[near], tau_new, d3[near], cfg.omega)
        through = tree.cost[near] + e
        parent = -1
        for j in np.argsort(through, kind="stable"):
            if not np.isfinite(through[j]):
                break
            if self.segment_free(pos[near[j], :2], p_new[:2]):
                parent = int(near[j])
                new_cost = float(through[j])
                break
        if parent < 0:
            return None
        new_id = tree.add(plane, tau_new, parent, new_cost)
        via_new = new_cost + e
        for j in np.flatnonzero((via_new < tree.cost[near] - 1e-12) & (near != parent)):
            nb = int(near[j])
            # an earlier rewire in this loop may already have lowered nb's cost
            if via_new[j] < tree.cost[nb] - 1e-12 and self.segment_free(p_new[:2], tree.pos[nb, :2]):
                tree.reparent(nb, new_id, float(via_new[j]))
        if math.hypot(*(p_new[:2] - self.goal)) <= cfg.goal_region_radius:
            tree.goal_nodes.append(new_id)
        if cfg.debug_checks:
            tree.check_invariants(cfg.omega)
        self._update_best()
        return new_id

    def _update_best(self) -> None:
        g = self.tree.goal_nodes
        if not g:
            return
        costs = self.tree.cost[g]
        k = int(np.argmin(costs))
        self.tree.best_node = g[k]
        if costs[k] < self.best_cost:
            self.best_cost = float(costs[k])
            self.cost_trace.append(CostEvent(self.iteration, time.perf_counter() - self._t0, self.best_cost))

    # -- driver -------------------------------------------------------------------

    def iterate(self, k: int, stop_on_first: bool = False) -> None:
        for _ in range(k):
            if stop_on_first and self.tree.best_node is not None:
                return
            self.iteration += 1
            self.extend_toward(self._sample())

    def seed_with_path(self, previous: Optional[SparsePath]) -> None:
        """Re-insert the previous path's nodes (re-fitted) ahead of sampling."""
        if previous is None or len(previous.nodes) == 0:
            return
        pts = previous.positions[:, :2]
        i0 = int(np.argmin(np.linalg.norm(pts - self.start, axis=1)))
        for p in pts[i0:]:
            hops = int(math.ceil(np.linalg.norm(p - self.start) / self.cfg.step)) + 2
            for _ in range(min(hops, 50)):
                nid = self.extend_toward(p)
                if nid is None:
                    break
                if np.linalg.norm(self.tree.pos[nid, :2] - p) < 1e-9:
                    break

    def best_path(self, refit: bool = True) -> Optional[SparsePath]:
        """Cheapest goal-region path, planes re-fitted toward the next node."""
        if self.tree.best_node is None:
            return None
        path = self.tree.path_to(self.tree.best_node)
        if refit:
            path = self._refit(path)
        self.tree.best_path = path
        return path

    def _refit(self, path: SparsePath) -> SparsePath:
        p = path.positions
        out = []
        for i, node in enumerate(path.nodes):
            if len(p) == 1:
                hint = np.array([1.0, 0.0, 0.0])
            elif i + 1 < len(p):
                hint = p[i + 1] - p[i]
            else:
                hint = p[i] - p[i - 1]
            if not np.any(hint):
                hint = np.array([1.0, 0.0, 0.0])
            plane, tau = node.plane.reoriented(hint), node.tau
            if not self.analyzer.nodes_from_cache:
                res = self.analyzer.fit_at(node.position, hint)
                if res is not None:
                    plane, tau = res[0], res[1].tau
            out.append(PlaneNode(node.id, plane, tau, node.parent, node.cost_from_root, node.children))
        return SparsePath(out, path.cost)


def replan_heuristic(planner: PFRRTStar, previous_path: Optional[SparsePath]) -> SamplingTree:
    planner.seed_with_path(previous_path)
    return planner.tree


def plan(grid: GridMap3D, cloud: PointCloud, start, goal, cfg: PlannerConfig,
         assess_cfg: AssessmentConfig, analyzer: Optional[TerrainAnalyzer] = None,
         previous_path: Optional[SparsePath] = None) -> tuple[Optional[SparsePath], SamplingTree]:
    """Run ``cfg.max_iterations`` iterations; always returns the tree."""
    if analyzer is None:
        analyzer = TerrainAnalyzer(grid, cloud, assess_cfg)
    planner = PFRRTStar(analyzer, cfg)
    planner.reset(start, goal)
    replan_heuristic(planner, previous_path)
    planner.iterate(cfg.max_iterations)
    return planner.best_path(), planner.tree
