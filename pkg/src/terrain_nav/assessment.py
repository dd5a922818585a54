"""Local plane fitting and traversability scoring.

A plane is fitted to the cloud points inside a cube around a surface point. Its
frame is (e_x, e_y, e_z) with e_z the upward unit normal, e_x the projection of a
heading hint into the plane and e_y = e_z x e_x. Traversability blends slope,
flatness and sparsity into a score in [0, 1]; 0 is freely passable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

_UP = np.array([0.0, 0.0, 1.0])
_DEGENERATE_RATIO = 1e-10


class AssessmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alphas: tuple[float, float, float] = (0.4, 0.3, 0.3)
    s_crit: float = Field(0.5, gt=0)
    f_crit: float = Field(0.02 ** 4, gt=0)
    lambda_crit: float = Field(1.0, gt=0)
    kappa_s: float = Field(2.0 / math.pi, gt=0)
    kappa_f: float = Field(1.0, gt=0)
    r_min: float = Field(0.1, ge=0, le=1)
    r_max: float = Field(0.5, ge=0, le=1)
    t_trace: float = Field(0.005, gt=0)
    min_support_points: int = Field(10, ge=3)
    side: float = Field(1.0, gt=0, description="edge length l_s of the support cube (m)")
    raster_cells: int = Field(8, ge=2, le=256)

    @model_validator(mode="after")
    def _check(self):
        if any(a < 0 for a in self.alphas):
            raise ValueError("alphas must be >= 0")
        if abs(sum(self.alphas) - 1.0) > 1e-9:
            raise ValueError(f"alphas must sum to 1, got {sum(self.alphas)}")
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be < r_max")
        return self


@dataclass(frozen=True)
class LocalPlane:
    center: np.ndarray
    rotation: np.ndarray  # columns e_x, e_y, e_z
    support: np.ndarray
    side: float

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def e_x(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def e_y(self) -> np.ndarray:
        return self.rotation[:, 1]

    def reoriented(self, hint) -> "LocalPlane":
        """Same plane with e_x re-derived from a new heading hint."""
        return LocalPlane(self.center, plane_frame(self.normal, hint), self.support, self.side)


@dataclass(frozen=True)
class TraversabilityScore:
    tau: float
    slope: float
    flatness: float
    sparsity: float
    vacancy: float = 0.0
    trace: float = 0.0


def plane_frame(normal: np.ndarray, hint) -> np.ndarray:
    """Rotation [e_x, e_y, e_z] from an upward unit normal and a heading hint.

    Falls back to world X, then world Y, when the hint is parallel to the normal.
    """
    zx, zy, zz = (float(c) for c in normal)
    for qx, qy, qz in (tuple(float(c) for c in hint), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)):
        k = qx * zx + qy * zy + qz * zz
        vx, vy, vz = qx - k * zx, qy - k * zy, qz - k * zz
        nv = math.sqrt(vx * vx + vy * vy + vz * vz)
        if nv > 1e-9 * max(1.0, math.sqrt(qx * qx + qy * qy + qz * qz)):
            break
    vx, vy, vz = vx / nv, vy / nv, vz / nv
    # e_y = e_z x e_x
    return np.array([
        [vx, zy * vz - zz * vy, zx],
        [vy, zz * vx - zx * vz, zy],
        [vz, zx * vy - zy * vx, zz],
    ])


def fit_plane(support, center, next_dir_hint, cfg: AssessmentConfig) -> Optional[LocalPlane]:
    """Least-squares plane through ``support`` with its frame anchored at ``center``.

    Returns None when there are fewer than ``cfg.min_support_points`` points or the
    support is collinear.
    """
    hint = np.asarray(next_dir_hint, dtype=float)
    if not np.any(hint):
        raise ValueError("next_dir_hint must be non-zero")
    pts = np.asarray(support, dtype=float)
    if len(pts) < cfg.min_support_points:
        return None
    mean = pts.mean(axis=0)
    # eigh of the scatter matrix == right singular vectors of the centred points
    scatter = pts.T @ pts - len(pts) * np.outer(mean, mean)
    evals, evecs = np.linalg.eigh(scatter)
    if evals[1] <= _DEGENERATE_RATIO * max(evals[2], 1e-300):
        return None
    n = evecs[:, 0]
    if n[2] < 0 or (n[2] == 0 and (n[0] < 0 or (n[0] == 0 and n[1] < 0))):
        n = -n
    return LocalPlane(np.asarray(center, dtype=float), plane_frame(n, hint), pts, cfg.side)


def slope(plane: LocalPlane, cfg: AssessmentConfig) -> float:
    """kappa_s times the inclination angle of the normal from world up."""
    c = min(max(float(plane.normal[2]), 0.0), 1.0)
    return cfg.kappa_s * math.acos(c)


def flatness(plane: LocalPlane, cfg: AssessmentConfig) -> float:
    """kappa_f times the mean fourth power of point-to-plane residuals."""
    pts = plane.support
    n = plane.normal
    d = pts @ n
    d -= d.mean()
    d2 = d * d
    return cfg.kappa_f * float(np.mean(d2 * d2))


def vacancy(plane: LocalPlane, cfg: AssessmentConfig) -> tuple[float, float]:
    """(vacant fraction r, tr(S^T S)) of the footprint raster.

    S is the covariance of the vacant cell centres in plane coordinates scaled
    by the footprint side.
    """
    n = cfg.raster_cells
    half = plane.side / 2.0
    uv = (plane.support - plane.center) @ plane.rotation[:, :2]
    inside = np.all(np.abs(uv) <= half, axis=1)
    cells = np.minimum(((uv[inside] + half) * (n / plane.side)).astype(np.int64), n - 1)
    filled = np.bincount(cells[:, 0] * n + cells[:, 1], minlength=n * n) > 0
    vacant = np.flatnonzero(~filled)
    r = len(vacant) / (n * n)
    if len(vacant) < 2:
        return r, 0.0
    c = np.column_stack([vacant // n, vacant % n]) * (1.0 / n)
    c -= c.mean(axis=0)
    sigma = (c.T @ c) / len(c)
    return r, float(np.sum(sigma * sigma))


def sparsity_from_vacancy(r: float, trace: float, cfg: AssessmentConfig) -> float:
    if r > cfg.r_max:
        return 1.0
    if cfg.r_min <= r <= cfg.r_max and trace < cfg.t_trace:
        return (r - cfg.r_min) / (cfg.r_max - cfg.r_min)
    return 0.0


def sparsity(plane: LocalPlane, cfg: AssessmentConfig) -> float:
    return sparsity_from_vacancy(*vacancy(plane, cfg), cfg)


def blend(s: float, f: float, lam: float, cfg: AssessmentConfig) -> float:
    a1, a2, a3 = cfg.alphas
    tau = a1 * s / cfg.s_crit + a2 * f / cfg.f_crit + a3 * lam / cfg.lambda_crit
    return min(max(tau, 0.0), 1.0)


def assess(plane: LocalPlane, cfg: AssessmentConfig) -> TraversabilityScore:
    s = slope(plane, cfg)
    f = flatness(plane, cfg)
    r, tr = vacancy(plane, cfg)
    lam = sparsity_from_vacancy(r, tr, cfg)
    return TraversabilityScore(blend(s, f, lam, cfg), s, f, lam, r, tr)
