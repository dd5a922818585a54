"""Gaussian-process densification of the sparse path.

The sparse path is linearly interpolated; traversability and its predictive
uncertainty at the interpolated points come from a zero-mean GP with an RBF
kernel trained on every node of the sampling tree (2D node positions -> tau).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .planner import SamplingTree, SparsePath


class GprConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sigma_f: float = Field(0.5, gt=0)
    length_scale: Optional[float] = Field(None, gt=0, description="defaults to the planner step")
    noise_var: float = Field(1e-4, gt=0)
    step: float = Field(0.1, gt=0, description="interpolation spacing (m)")
    max_train: int = Field(2500, ge=1, description="uniform subsample above this many tree nodes")


def rbf(a: np.ndarray, b: np.ndarray, sigma_f: float, length_scale: float) -> np.ndarray:
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return sigma_f ** 2 * np.exp(-d2 / (2.0 * length_scale ** 2))


@dataclass(frozen=True)
class GprModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    sigma_f: float
    length_scale: float
    noise_var: float
    factor: tuple  # lower Cholesky factor of K + noise*I, as returned by cho_factor
    alpha: np.ndarray

    def predict(self, queries) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, queries)


def fit_arrays(x: np.ndarray, y: np.ndarray, sigma_f: float, length_scale: float,
               noise_var: float) -> GprModel:
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    k = rbf(x, x, sigma_f, length_scale)
    k[np.diag_indices_from(k)] += noise_var
    factor = cho_factor(k, lower=True)
    alpha = cho_solve(factor, y)
    assert np.all(np.isfinite(alpha)), "GP factorisation failed"
    return GprModel(x, y, sigma_f, length_scale, noise_var, factor, alpha)


def fit(tree: SamplingTree, sigma_f: float, length_scale: float, noise_var: float,
        max_train: int = 2500, seed: int = 0) -> GprModel:
    """Train on (2D node position, tau) for every tree node, uniformly capped at ``max_train``."""
    if len(tree) == 0:
        raise ValueError("cannot fit a GP to an empty tree")
    if not noise_var > 0:
        raise ValueError("noise_var must be > 0")
    x = tree.positions[:, :2]
    y = tree.taus
    if len(x) > max_train:
        keep = np.sort(np.random.default_rng(seed).choice(len(x), max_train, replace=False))
        x, y = x[keep], y[keep]
    return fit_arrays(x, y, sigma_f, length_scale, noise_var)


def predict(model: GprModel, queries) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance (floored at 0) at 2D query points."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    ks = rbf(model.train_inputs, q, model.sigma_f, model.length_scale)
    mean = ks.T @ model.alpha
    v = solve_triangular(model.factor[0], ks, lower=True, check_finite=False)
    var = model.sigma_f ** 2 - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def interpolate(positions, step: float) -> np.ndarray:
    """Evenly subdivide each segment so spacing <= step, keeping every vertex once."""
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        raise ValueError("interpolation needs a path with at least 2 nodes")
    if not step > 0:
        raise ValueError("step must be > 0")
    out = [p[:1]]
    for a, b in zip(p[:-1], p[1:]):
        m = max(1, int(math.ceil(np.linalg.norm(b - a) / step - 1e-9)))
        t = np.arange(1, m + 1)[:, None] / m
        out.append(a + t * (b - a))
    return np.vstack(out)


@dataclass
class DensePath:
    positions: np.ndarray  # (m, 3)
    tau: np.ndarray  # clamped to [0, 1]
    sigma: np.ndarray  # predictive standard deviation
    tau_raw: np.ndarray
    normals: np.ndarray  # plane normal of the nearest sparse node, per waypoint

    def __len__(self) -> int:
        return len(self.positions)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "tau", "sigma"])
            for (x, y, z), t, s in zip(self.positions.tolist(), self.tau.tolist(), self.sigma.tolist()):
                w.writerow([repr(x), repr(y), repr(z), repr(t), repr(s)])


def densify(path: SparsePath, tree: SamplingTree, cfg: GprConfig, length_scale: float,
            seed: int = 0) -> DensePath:
    sparse = path.positions
    if len(sparse) == 1:
        pts = sparse.copy()
    else:
        pts = interpolate(sparse, cfg.step)
    model = fit(tree, cfg.sigma_f, length_scale, cfg.noise_var, cfg.max_train, seed)
    mean, var = predict(model, pts[:, :2])
    normals_sparse = np.array([n.plane.normal for n in path.nodes])
    d = np.linalg.norm(pts[:, None, :] - sparse[None, :, :], axis=2)
    normals = normals_sparse[np.argmin(d, axis=1)]
    return DensePath(pts, np.clip(mean, 0.0, 1.0), np.sqrt(var), mean, normals)
