"""Receding-horizon NMPC tracking of the dense path.

The model is a differential drive whose translational advance is scaled by the
local plane normal. The horizon problem is transcribed by single shooting over
the control sequence. Obstacle clearance and map bounds enter as quadratic
penalties whose weight is escalated until the rolled-out trajectory passes a
hard feasibility check; control bounds are box constraints of the inner
L-BFGS-B solve. Gradients are accumulated in reverse through the rollout.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize

from .gpr import DensePath


class NmpcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    horizon: int = Field(20, ge=1, le=200)
    horizon_time: float = Field(1.0, gt=0)
    q_diag: tuple[float, float, float] = (1.0, 1.0, 0.1)
    r_diag: tuple[float, float] = (0.1, 0.05)
    v_max: float = Field(1.5, gt=0)
    omega_max: float = Field(1.5, gt=0)
    v_ref: float = Field(1.5, gt=0, description="reference speed used to space the desired states")
    d_safe: float = Field(0.5, ge=0)
    clearance_margin: float = Field(0.01, ge=0)
    penalty_weights: tuple[float, ...] = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
    max_inner_iter: int = Field(100, ge=1)
    time_budget: Optional[float] = Field(None, gt=0, description="wall-clock cap per solve (s); breaks determinism")
    obstacle_limit: int = Field(64, ge=1)
    use_traversability_weight: bool = True
    max_infeasible_steps: int = Field(20, ge=1)

    @property
    def dt(self) -> float:
        return self.horizon_time / self.horizon


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a) + math.pi, 2 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def plane_scales(normal) -> tuple[float, float]:
    """(|n x e_x|, |n x e_y|) for world horizontal axes e_x, e_y."""
    nx, ny, nz = (float(c) for c in normal)
    return math.sqrt(ny * ny + nz * nz), math.sqrt(nx * nx + nz * nz)


def dynamics_step(s: RobotState, u: ControlInput, normal, dt: float) -> RobotState:
    sx, sy = plane_scales(normal)
    return RobotState(
        s.x + sx * math.cos(s.theta) * u.v * dt,
        s.y + sy * math.sin(s.theta) * u.v * dt,
        wrap_angle(s.theta + u.omega * dt),
    )


def traversability_weight(t_mean: float, sigma_mean: float) -> float:
    t = min(max(t_mean, 0.0), 0.99)
    s = min(max(sigma_mean, 0.0), 0.99)
    return ((1.0 - t) * (1.0 - s)) ** -2


# ---------------------------------------------------------------------------
# Reference selection


@dataclass
class Reference:
    states: np.ndarray  # (N, 3) desired states for steps 1..N
    t_mean: float
    sigma_mean: float
    normal: np.ndarray
    progress: float  # arclength of the robot's closest point on the path
    at_end: bool


class _PathTrack:
    """2D arclength parametrisation of a dense path (vertical duplicates dropped)."""

    def __init__(self, dense: DensePath):
        xy = dense.positions[:, :2]
        keep = np.ones(len(xy), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-9
        self.idx = np.flatnonzero(keep)
        self.xy = xy[self.idx]
        self.tau = dense.tau[self.idx]
        self.sigma = dense.sigma[self.idx]
        self.normals = dense.normals[self.idx]
        seg = np.linalg.norm(np.diff(self.xy, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.total = float(self.s[-1])
        d = np.diff(self.xy, axis=0)
        self.heading = np.arctan2(d[:, 1], d[:, 0]) if len(d) else np.zeros(1)

    def closest(self, p: np.ndarray, s_hint: Optional[float], window: tuple[float, float]) -> float:
        if len(self.xy) == 1:
            return 0.0
        a, b = self.xy[:-1], self.xy[1:]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(proj - p, axis=1)
        s = self.s[:-1] + t * (self.s[1:] - self.s[:-1])
        if s_hint is not None:
            ok = (s >= s_hint - window[0]) & (s <= s_hint + window[1])
            if ok.any():
                d = np.where(ok, d, np.inf)
        return float(s[int(np.argmin(d))])

    def at(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        seg = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, max(len(self.heading) - 1, 0))
        th = self.heading[seg] if len(self.xy) > 1 else np.zeros_like(s)
        return (np.column_stack([x, y, th]), np.interp(s, self.s, self.tau),
                np.interp(s, self.s, self.sigma), seg)


def select_reference(dense: DensePath, state: RobotState, N: int, dt: float, v_ref: float,
                     s_hint: Optional[float] = None, track: Optional[_PathTrack] = None) -> Reference:
    """Desired states spaced v_ref*dt along the path ahead of the robot's closest point."""
    if len(dense) == 0:
        raise ValueError("dense path is empty")
    track = track or _PathTrack(dense)
    p = np.array([state.x, state.y])
    s0 = track.closest(p, s_hint, (0.5, 3.0))
    s = np.minimum(s0 + v_ref * dt * np.arange(1, N + 1), track.total)
    states, tau, sig, _ = track.at(s)
    near = int(np.argmin(np.linalg.norm(track.xy - p, axis=1)))
    return Reference(states, float(np.mean(tau)), float(np.mean(sig)), track.normals[near].copy(),
                     s0, bool(s0 >= track.total - 1e-9))


# ---------------------------------------------------------------------------
# Horizon problem


@dataclass
class NmpcProblem:
    x0: np.ndarray
    ref: np.ndarray  # (N, 3)
    normal: np.ndarray
    obstacles: np.ndarray  # (M, 2)
    q: np.ndarray
    r: np.ndarray
    lam: float
    d_safe: float
    v_max: float
    omega_max: float
    dt: float
    margin: float = 0.01
    xy_bounds: Optional[tuple[np.ndarray, np.ndarray]] = None
    # per-obstacle clearance actually required (never more than the current clearance)
    clearance: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.ref = np.asarray(self.ref, dtype=float).reshape(-1, 3)
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if np.any(self.q <= 0) or np.any(self.r <= 0):
            raise ValueError("Q and R must be positive definite")
        d0 = np.linalg.norm(self.obstacles - self.x0[:2], axis=1)
        self.clearance = np.minimum(self.d_safe, d0)

    @property
    def N(self) -> int:
        return len(self.ref)

    @property
    def scales(self) -> tuple[float, float]:
        return plane_scales(self.normal)


@dataclass
class NmpcSolution:
    states: np.ndarray  # (N+1, 3)
    controls: np.ndarray  # (N, 2)
    objective: float
    feasible: bool
    penalty_weight: float = 0.0
    iterations: int = 0

    def shifted(self) -> np.ndarray:
        return np.vstack([self.controls[1:], self.controls[-1:]])


def rollout(x0: np.ndarray, u: np.ndarray, sx: float, sy: float, dt: float) -> np.ndarray:
    """States 0..N for controls (N, 2); heading is left unwrapped."""
    v, w = u[:, 0], u[:, 1]
    theta = x0[2] + dt * np.concatenate([[0.0], np.cumsum(w)])
    th = theta[:-1]
    x = x0[0] + np.concatenate([[0.0], np.cumsum(sx * np.cos(th) * v * dt)])
    y = x0[1] + np.concatenate([[0.0], np.cumsum(sy * np.sin(th) * v * dt)])
    return np.column_stack([x, y, theta])


def objective_and_grad(u_flat: np.ndarray, prob: NmpcProblem, weight: float) -> tuple[float, np.ndarray]:
    """Penalised cost and its gradient w.r.t. the flattened controls.

    Weighted norms follow ||x||_A = 0.5 sqrt(x^T A x), so squared norms carry 1/4.
    """
    u = u_flat.reshape(-1, 2)
    sx, sy = prob.scales
    dt = prob.dt
    X = rollout(prob.x0, u, sx, sy, dt)
    P = X[1:]
    e = P - prob.ref
    e[:, 2] = wrap_angle(e[:, 2])
    J = 0.25 * float(np.sum(prob.q * e * e)) + 0.25 * prob.lam * float(np.sum(prob.r * u * u))
    gX = 0.5 * prob.q * e
    gU = 0.5 * prob.lam * prob.r * u

    if len(prob.obstacles):
        diff = P[:, None, :2] - prob.obstacles[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        req = prob.clearance + prob.margin * (prob.clearance > 0)
        viol = np.maximum(req[None, :] - dist, 0.0)
        if np.any(viol > 0):
            J += weight * float(np.sum(viol * viol))
            coef = np.where(viol > 0, -2.0 * weight * viol / np.maximum(dist, 1e-12), 0.0)
            gX[:, :2] += np.einsum("ij,ijk->ik", coef, diff)
    if prob.xy_bounds is not None:
        lo, hi = prob.xy_bounds
        over = np.maximum(P[:, :2] - hi, 0.0)
        under = np.minimum(P[:, :2] - lo, 0.0)
        J += weight * float(np.sum(over * over) + np.sum(under * under))
        gX[:, :2] += 2.0 * weight * (over + under)

    # reverse accumulation through the rollout
    th = X[:-1, 2]
    v = u[:, 0]
    A = np.cumsum(gX[::-1, 0])[::-1]  # A[j] = sum over states j+1..N
    B = np.cumsum(gX[::-1, 1])[::-1]
    cos_t, sin_t = np.cos(th), np.sin(th)
    gU[:, 0] += dt * (sx * cos_t * A + sy * sin_t * B)
    indirect = dt * v * (-sx * sin_t * A + sy * cos_t * B)  # dJ/dtheta_j via later positions
    G = gX[:, 2] + np.concatenate([indirect[1:], [0.0]])  # total dJ/dtheta_j, j = 1..N
    gU[:, 1] += dt * np.cumsum(G[::-1])[::-1]
    return J, gU.ravel()


def tracking_objective(u: np.ndarray, prob: NmpcProblem) -> float:
    return objective_and_grad(u.ravel(), _without_constraints(prob), 0.0)[0]


def _without_constraints(prob: NmpcProblem) -> NmpcProblem:
    return NmpcProblem(prob.x0, prob.ref, prob.normal, np.empty((0, 2)), prob.q, prob.r, prob.lam,
                       prob.d_safe, prob.v_max, prob.omega_max, prob.dt, prob.margin, None)


def verify(prob: NmpcProblem, states: np.ndarray, controls: np.ndarray) -> bool:
    """Hard check of control bounds, map bounds and clearance on a rollout."""
    if np.any(np.abs(controls[:, 0]) > prob.v_max) or np.any(np.abs(controls[:, 1]) > prob.omega_max):
        return False
    P = states[1:, :2]
    if prob.xy_bounds is not None:
        lo, hi = prob.xy_bounds
        if np.any(P < lo) or np.any(P > hi):
            return False
    if len(prob.obstacles):
        dist = np.linalg.norm(P[:, None, :] - prob.obstacles[None], axis=2)
        if np.any(dist < prob.clearance[None, :]):
            return False
    return True


def solve(prob: NmpcProblem, warm_start=None, cfg: Optional[NmpcConfig] = None) -> NmpcSolution:
    cfg = cfg or NmpcConfig()
    N = prob.N
    if warm_start is None:
        u = np.zeros((N, 2))
    elif isinstance(warm_start, NmpcSolution):
        u = warm_start.shifted()
    else:
        u = np.asarray(warm_start, dtype=float).reshape(N, 2)
    bounds = [(-prob.v_max, prob.v_max), (-prob.omega_max, prob.omega_max)] * N
    z = np.clip(u.ravel(), [b[0] for b in bounds], [b[1] for b in bounds])
    sx, sy = prob.scales
    t0 = time.perf_counter()
    iters = 0
    feasible = False
    weight = 0.0
    for weight in cfg.penalty_weights:
        res = minimize(objective_and_grad, z, args=(prob, weight), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": cfg.max_inner_iter})
        z = res.x
        iters += int(res.nit)
        X = rollout(prob.x0, z.reshape(N, 2), sx, sy, prob.dt)
        feasible = verify(prob, X, z.reshape(N, 2))
        if feasible:
            break
        if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
            break
    controls = z.reshape(N, 2)
    X = rollout(prob.x0, controls, sx, sy, prob.dt)
    X[:, 2] = wrap_angle(X[:, 2])
    return NmpcSolution(X, controls, tracking_objective(controls, prob), feasible, weight, iters)


# ---------------------------------------------------------------------------
# Closed loop


class World(Protocol):
    robot: RobotState
    clock: float

    def sense_obstacles(self, limit: int) -> np.ndarray: ...

    def xy_bounds(self) -> tuple[np.ndarray, np.ndarray]: ...

    def apply(self, u: ControlInput, dt: float) -> None: ...


@dataclass
class LogRow:
    t: float
    x: float
    y: float
    theta: float
    v: float
    omega: float
    t_mean: float
    sigma_mean: float
    lam: float


LOG_FIELDS = ["t", "x", "y", "theta", "v", "omega", "t_mean", "sigma_mean", "lambda"]


def write_log_csv(rows: list[LogRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([repr(float(v)) for v in (r.t, r.x, r.y, r.theta, r.v, r.omega,
                                                 r.t_mean, r.sigma_mean, r.lam)])


@dataclass
class LoopResult:
    rows: list[LogRow]
    status: str  # "goal", "steps" or "infeasible"
    min_clearance: float = math.inf


def control_loop(dense: DensePath, world: World, cfg: NmpcConfig, goal=None,
                 goal_tolerance: float = 0.3, max_steps: int = 10_000) -> LoopResult:
    """Track ``dense`` until the goal is reached, the step cap hits or the solver keeps failing."""
    goal = np.asarray(dense.positions[-1, :2] if goal is None else goal, dtype=float)
    track = _PathTrack(dense)
    rows: list[LogRow] = []
    warm: Optional[NmpcSolution] = None
    s_hint: Optional[float] = None
    infeasible = 0
    min_clear = math.inf
    lo, hi = world.xy_bounds()
    for _ in range(max_steps):
        st = world.robot
        if math.hypot(st.x - goal[0], st.y - goal[1]) <= goal_tolerance:
            return LoopResult(rows, "goal", min_clear)
        ref = select_reference(dense, st, cfg.horizon, cfg.dt, cfg.v_ref, s_hint, track)
        s_hint = ref.progress
        lam = traversability_weight(ref.t_mean, ref.sigma_mean) if cfg.use_traversability_weight else 1.0
        obstacles = world.sense_obstacles(cfg.obstacle_limit)
        if len(obstacles):
            min_clear = min(min_clear, float(np.min(np.linalg.norm(obstacles - [st.x, st.y], axis=1))))
        prob = NmpcProblem(st.as_array(), ref.states, ref.normal, obstacles, np.array(cfg.q_diag),
                           np.array(cfg.r_diag), lam, cfg.d_safe, cfg.v_max, cfg.omega_max, cfg.dt,
                           cfg.clearance_margin, (lo, hi))
        sol = solve(prob, warm, cfg)
        if sol.feasible:
            u = ControlInput(float(sol.controls[0, 0]), float(sol.controls[0, 1]))
            warm = sol
            infeasible = 0
        else:
            u = ControlInput(0.0, 0.0)
            warm = None
            infeasible += 1
        rows.append(LogRow(world.clock, st.x, st.y, st.theta, u.v, u.omega, ref.t_mean, ref.sigma_mean, lam))
        if infeasible >= cfg.max_infeasible_steps:
            return LoopResult(rows, "infeasible", min_clear)
        world.apply(u, cfg.dt)
    return LoopResult(rows, "steps", min_clear)
