"""Per-location terrain assessment with a per-column cache.

``TerrainAnalyzer`` is the bridge between the map and the assessment functions.
In lazy mode (PF-RRT*) node planes are fitted on demand and column scores used
for edge checks are memoised as they are touched. ``analyze_all`` fills every
surface column up front; with ``nodes_from_cache`` the planner then reads node
scores from that cache instead of fitting (the RRT*+Analyse baseline).
"""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .assessment import AssessmentConfig, LocalPlane, TraversabilityScore, assess, fit_plane, plane_frame
from .terrain import GridMap3D, PointCloud, SurfacePoint, query_neighborhood

_X = np.array([1.0, 0.0, 0.0])


class TerrainAnalyzer:
    def __init__(self, grid: GridMap3D, cloud: PointCloud, cfg: AssessmentConfig,
                 nodes_from_cache: bool = False):
        self.map = grid
        self.cloud = cloud
        self.cfg = cfg
        self.nodes_from_cache = nodes_from_cache
        nx, ny, _ = grid.dims
        # nan: not assessed yet, inf: no surface or plane fit failed
        self.col_tau = np.full((nx, ny), np.nan)
        self.col_tau[grid.surface_k < 0] = np.inf
        self.col_normal = np.zeros((nx, ny, 3))
        self.n_fits = 0

    # -- single-point fitting ------------------------------------------------

    def fit_at(self, point, hint) -> Optional[tuple[LocalPlane, TraversabilityScore]]:
        support = query_neighborhood(self.cloud, point, self.cfg.side)
        self.n_fits += 1
        plane = fit_plane(support, point, hint, self.cfg)
        if plane is None:
            return None
        return plane, assess(plane, self.cfg)

    def _assess_column(self, ix: int, iy: int) -> float:
        k = self.map.surface_k[ix, iy]
        if k < 0:
            return np.inf
        c = self.map.grid_to_world(np.array([ix, iy]))
        point = np.array([c[0], c[1], float(self.map.surface_z(k))])
        res = self.fit_at(point, _X)
        if res is None:
            tau = np.inf
        else:
            plane, score = res
            tau = score.tau
            self.col_normal[ix, iy] = plane.normal
        self.col_tau[ix, iy] = tau
        return tau

    def column_tau(self, ix: int, iy: int) -> float:
        t = self.col_tau[ix, iy]
        if np.isnan(t):
            t = self._assess_column(ix, iy)
        return float(t)

    def taus_at(self, xy: np.ndarray) -> np.ndarray:
        """Column traversability for an (m, 2) array; inf outside the map."""
        ix, iy, inside = self.map.columns(xy)
        out = np.full(len(ix), np.inf)
        ixi, iyi = ix[inside], iy[inside]
        t = self.col_tau[ixi, iyi]
        for j in np.flatnonzero(np.isnan(t)):
            t[j] = self._assess_column(int(ixi[j]), int(iyi[j]))
        out[inside] = t
        return out

    def normal_at(self, xy) -> np.ndarray:
        ix, iy, inside = self.map.columns(np.atleast_2d(xy))
        if not inside[0] or not np.isfinite(self.column_tau(int(ix[0]), int(iy[0]))):
            return np.array([0.0, 0.0, 1.0])
        return self.col_normal[ix[0], iy[0]].copy()

    def analyze_all(self) -> float:
        """Assess every surface column; returns elapsed wall time in seconds."""
        t0 = time.perf_counter()
        for ix, iy in np.argwhere(np.isnan(self.col_tau)):
            self._assess_column(int(ix), int(iy))
        return time.perf_counter() - t0

    # -- planner nodes ----------------------------------------------------------

    def node_at(self, xy, hint) -> Optional[tuple[SurfacePoint, LocalPlane, float]]:
        """Surface point, local plane and tau for a planner node at ``xy``."""
        if not self.map.in_bounds_xy(xy):
            return None
        sp = self.map.project_to_surface(xy)
        if sp is None:
            return None
        res = self.plane_for(sp, hint)
        if res is None:
            return None
        return (sp, *res)

    def plane_for(self, sp: SurfacePoint, hint) -> Optional[tuple[LocalPlane, float]]:
        if self.nodes_from_cache:
            tau = self.column_tau(*sp.column)
            if not np.isfinite(tau):
                return None
            n = self.col_normal[sp.column]
            return LocalPlane(sp.position, plane_frame(n, hint), np.empty((0, 3)), self.cfg.side), tau
        res = self.fit_at(sp.position, hint)
        if res is None:
            return None
        plane, score = res
        return plane, score.tau
