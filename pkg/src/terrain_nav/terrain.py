"""Point clouds, voxel grid maps and synthetic terrain.

A :class:`GridMap3D` is built from a :class:`PointCloud` and answers surface
projection queries (lowest occupied voxel with free space above it). Plane
fitting neighbourhoods are always taken from the original cloud, never from the
voxels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Annotated, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial import cKDTree


class TerrainError(ValueError):
    """Raised for malformed clouds, maps or terrain specs."""


class PointCloudParseError(TerrainError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Immutable set of 3D points in the world frame (metres)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise TerrainError(f"expected (n, 3) points, got shape {pts.shape}")
        if len(pts) == 0:
            raise TerrainError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise TerrainError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.points)

    def box_index(self, cell: float) -> "BoxIndex":
        idx = self.__dict__.setdefault("_box_indexes", {})
        if cell not in idx:
            idx[cell] = BoxIndex(self.points, cell)
        return idx[cell]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


# ---------------------------------------------------------------------------
# File formats


def _parse_xyz(lines: Sequence[str], path: str) -> np.ndarray:
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise PointCloudParseError(
                f"{path}:{lineno}: expected 3 fields 'x y z', got {len(parts)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise PointCloudParseError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    return np.array(rows, dtype=float).reshape(-1, 3)


def _parse_pcd(lines: Sequence[str], path: str) -> np.ndarray:
    header: dict[str, list[str]] = {}
    data_start = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        header[key.upper()] = vals
        if key.upper() == "DATA":
            data_start = lineno
            break
    if data_start is None:
        raise PointCloudParseError(f"{path}: PCD header has no DATA line")
    mode = header["DATA"][0].lower() if header["DATA"] else ""
    if mode != "ascii":
        raise PointCloudParseError(f"{path}: only ASCII PCD is supported (DATA {mode or '?'})")
    fields = [f.lower() for f in header.get("FIELDS", [])]
    if not {"x", "y", "z"} <= set(fields):
        raise PointCloudParseError(f"{path}: PCD FIELDS must include x y z, got {fields}")
    cols = [fields.index(c) for c in ("x", "y", "z")]
    rows = []
    for lineno in range(data_start + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != len(fields):
            raise PointCloudParseError(
                f"{path}:{lineno}: expected {len(fields)} fields, got {len(parts)}"
            )
        try:
            rows.append([float(parts[c]) for c in cols])
        except ValueError:
            raise PointCloudParseError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    pts = np.array(rows, dtype=float).reshape(-1, 3)
    if "POINTS" in header and int(header["POINTS"][0]) != len(pts):
        raise PointCloudParseError(
            f"{path}: header declares {header['POINTS'][0]} points, found {len(pts)}"
        )
    return pts


def _format_name(path: Path, format: Optional[str]) -> str:
    if format is None:
        return "pcd-ascii" if path.suffix.lower() == ".pcd" else "xyz-ascii"
    return {"xyz": "xyz-ascii", "pcd": "pcd-ascii"}.get(format, format)


def load_point_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read an ``xyz-ascii`` or ``pcd-ascii`` file.

    The format is inferred from the suffix (``.pcd`` -> pcd-ascii) when not given.
    """
    path = Path(path)
    format = _format_name(path, format)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise TerrainError(f"point cloud not found: {path}") from None
    # binary PCD payloads are not valid text; only the header needs decoding
    text = raw.decode("utf-8", errors="replace")
    lines = text.splitlines()
    if format == "xyz-ascii":
        pts = _parse_xyz(lines, str(path))
    elif format == "pcd-ascii":
        pts = _parse_pcd(lines, str(path))
    else:
        raise TerrainError(f"unknown point cloud format {format!r}")
    if len(pts) == 0:
        raise PointCloudParseError(f"{path}: no points")
    return PointCloud(pts)


def write_point_cloud(path, cloud: PointCloud, format: Optional[str] = None) -> None:
    path = Path(path)
    format = _format_name(path, format)
    body = "\n".join(f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist())
    if format == "xyz-ascii":
        path.write_text(body + "\n")
    elif format == "pcd-ascii":
        n = len(cloud)
        header = (
            "# .PCD v0.7 - Point Cloud Data file format\n"
            "VERSION 0.7\nFIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n"
            f"WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n"
        )
        path.write_text(header + body + "\n")
    else:
        raise TerrainError(f"unknown point cloud format {format!r}")


# ---------------------------------------------------------------------------
# Grid map


@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray
    column: tuple[int, int]
    k: int  # voxel layer index of the surface voxel


@dataclass(frozen=True, eq=False)
class GridMap3D:
    """Voxel occupancy grid on a lattice aligned to integer multiples of ``res``.

    ``lattice_origin`` holds the integer lattice coordinates of voxel (0, 0, 0);
    the metric origin is ``lattice_origin * res``.
    """

    res: float
    lattice_origin: np.ndarray
    occupancy: np.ndarray
    surface_k: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.res > 0:
            raise TerrainError(f"res must be > 0, got {self.res}")
        occ = np.ascontiguousarray(self.occupancy, dtype=bool)
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "lattice_origin", np.asarray(self.lattice_origin, dtype=np.int64))
        object.__setattr__(self, "surface_k", _surface_layers(occ))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def origin(self) -> np.ndarray:
        return self.lattice_origin * self.res

    @property
    def z_l(self) -> float:
        return float(self.origin[2])

    @property
    def xy_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin[:2]
        return lo, lo + np.array(self.dims[:2]) * self.res

    def world_to_grid(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.floor(p / self.res).astype(np.int64) - self.lattice_origin[: p.shape[-1]]

    def grid_to_world(self, v) -> np.ndarray:
        """Centre of voxel ``v``."""
        v = np.asarray(v)
        return (v + self.lattice_origin[: v.shape[-1]] + 0.5) * self.res

    def in_bounds_xy(self, xy) -> bool:
        ij = self.world_to_grid(np.asarray(xy, dtype=float)[:2])
        return bool(0 <= ij[0] < self.dims[0] and 0 <= ij[1] < self.dims[1])

    def columns(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised column lookup: (ix, iy, inside mask) for an (m, 2) array."""
        ij = np.floor(np.asarray(xy, dtype=float) / self.res).astype(np.int64) - self.lattice_origin[:2]
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < self.dims[0]) & (ij[:, 1] >= 0) & (ij[:, 1] < self.dims[1])
        return ij[:, 0], ij[:, 1], inside

    def surface_z(self, k) -> np.ndarray:
        return (self.lattice_origin[2] + np.asarray(k)) * self.res

    def project_to_surface(self, xy) -> Optional[SurfacePoint]:
        """Lowest lattice height with an occupied voxel and a free voxel above it.

        Returns None for fully free and fully occupied columns.
        """
        xy = np.asarray(xy, dtype=float)
        ix, iy = (int(c) for c in self.world_to_grid(xy[:2]))
        if not (0 <= ix < self.dims[0] and 0 <= iy < self.dims[1]):
            raise TerrainError(f"point {tuple(xy[:2])} outside map bounds")
        k = int(self.surface_k[ix, iy])
        if k < 0:
            return None
        z = float(self.surface_z(k))
        return SurfacePoint(np.array([xy[0], xy[1], z]), (ix, iy), k)

    def occupied_centers(self) -> np.ndarray:
        return self.grid_to_world(np.argwhere(self.occupancy))


def _surface_layers(occ: np.ndarray) -> np.ndarray:
    """Per column, lowest layer k with occ[k] and not occ[k+1]; -1 when none.

    The layer above the top of the grid is unknown, so it never counts as free.
    """
    nx, ny, nz = occ.shape
    cand = np.zeros_like(occ)
    cand[:, :, : nz - 1] = occ[:, :, : nz - 1] & ~occ[:, :, 1:]
    has = cand.any(axis=2)
    k = np.argmax(cand, axis=2).astype(np.int64)
    k[~has] = -1
    return k


def voxelize(cloud: PointCloud, res: float) -> GridMap3D:
    """Occupancy grid over the cloud AABB padded by one voxel on each side."""
    if not res > 0:
        raise TerrainError(f"res must be > 0, got {res}")
    idx = np.floor(cloud.points / res).astype(np.int64)
    lo = idx.min(axis=0) - 1
    hi = idx.max(axis=0) + 1
    dims = tuple(int(d) for d in hi - lo + 1)
    occ = np.zeros(dims, dtype=bool)
    rel = idx - lo
    occ[rel[:, 0], rel[:, 1], rel[:, 2]] = True
    return GridMap3D(res=float(res), lattice_origin=lo, occupancy=occ)


class BoxIndex:
    """Points bucketed into x-rows of width ``cell`` and sorted by y inside each row.

    Rows are laid out on one sorted key ``row * span + (y - y_min)``, so a box
    query is a single vectorised searchsorted plus an x/z filter.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.cell = cell
        row = np.floor(points[:, 0] / cell).astype(np.int64)
        self.row0 = int(row.min())
        row -= self.row0
        self.n_rows = int(row.max()) + 1
        self.y0 = float(points[:, 1].min())
        self.span = float(points[:, 1].max()) - self.y0 + 1.0
        order = np.lexsort((points[:, 1], row))
        self.points = np.ascontiguousarray(points[order])
        self.keys = row[order] * self.span + (self.points[:, 1] - self.y0)

    def query(self, center: np.ndarray, half: float) -> np.ndarray:
        cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
        r0 = max(int(math.floor((cx - half) / self.cell)) - self.row0, 0)
        r1 = min(int(math.floor((cx + half) / self.cell)) - self.row0, self.n_rows - 1)
        if r0 > r1:
            return self.points[:0]
        base = np.arange(r0, r1 + 1) * self.span
        lo = max(cy - half - self.y0 - 1e-7, -0.5)
        hi = min(cy + half - self.y0 + 1e-7, self.span - 0.5)
        a = np.searchsorted(self.keys, base + lo, "left")
        b = np.searchsorted(self.keys, base + hi, "right")
        counts = b - a
        total = int(counts.sum())
        if total == 0:
            return self.points[:0]
        offsets = np.cumsum(counts) - counts
        idx = np.arange(total) + np.repeat(a - offsets, counts)
        cand = self.points[idx]
        keep = ((np.abs(cand[:, 0] - cx) <= half) & (np.abs(cand[:, 1] - cy) <= half)
                & (np.abs(cand[:, 2] - cz) <= half))
        return cand[keep]


def query_neighborhood(cloud: PointCloud, center, side: float) -> np.ndarray:
    """Points inside the axis-aligned cube of edge ``side`` centred at ``center``."""
    if not side > 0:
        raise TerrainError(f"side must be > 0, got {side}")
    return cloud.box_index(float(side) / 8.0).query(np.asarray(center, dtype=float), side / 2.0)


# ---------------------------------------------------------------------------
# Synthetic terrain

Range = tuple[float, float]


class _Footprint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: Range
    y: Range

    @field_validator("x", "y")
    @classmethod
    def _positive_extent(cls, v: Range) -> Range:
        if not v[1] > v[0]:
            raise ValueError(f"size must be positive, got range {list(v)}")
        return v

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (
            (pts[:, 0] >= self.x[0]) & (pts[:, 0] <= self.x[1])
            & (pts[:, 1] >= self.y[0]) & (pts[:, 1] <= self.y[1])
        )


class Plate(_Footprint):
    type: Literal["plate"]
    z: float = 0.0


class Ramp(_Footprint):
    """Inclined plane rising along ``axis`` from height ``z0`` at the low edge."""

    type: Literal["ramp"]
    angle_deg: float = Field(ge=-80.0, le=80.0)
    axis: Literal["x", "y", "-x", "-y"] = "x"
    z0: float = 0.0


class Step(_Footprint):
    type: Literal["step"]
    axis: Literal["x", "y"] = "x"
    at: float
    height: float
    z0: float = 0.0


class Hole(_Footprint):
    type: Literal["hole"]


class Bumps(_Footprint):
    """Random Gaussian bumps added to every surface point in the footprint."""

    type: Literal["bumps"]
    amplitude: float
    sigma: float = Field(gt=0.0)
    count: int = Field(ge=1, le=100_000)


class Corrugation(_Footprint):
    """Sinusoidal ridges ``amplitude * sin(2 pi s / wavelength)`` along ``axis``."""

    type: Literal["corrugation"]
    amplitude: float
    wavelength: float = Field(gt=0.0)
    axis: Literal["x", "y"] = "x"


class Cylinder(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["cylinder"]
    center: tuple[float, float]
    radius: float = Field(gt=0.0)
    height: float = Field(gt=0.0)
    z0: float = 0.0


Primitive = Annotated[
    Union[Plate, Ramp, Step, Hole, Bumps, Corrugation, Cylinder], Field(discriminator="type")
]


class TerrainSpec(BaseModel):
    """JSON terrain description; see README for the schema."""

    model_config = ConfigDict(extra="forbid")

    name: str = "terrain"
    seed: int = 0
    spacing: float = Field(0.05, gt=0.0, le=1.0)
    noise_std: float = Field(0.0, ge=0.0)
    primitives: list[Primitive] = Field(min_length=1)
    start: Optional[tuple[float, float]] = None
    goal: Optional[tuple[float, float]] = None
    # footprint of a region of interest used by scenario checks (e.g. a gap or a rough band)
    regions: dict[str, _Footprint] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _has_surface(self):
        if not any(isinstance(p, (Plate, Ramp, Step, Cylinder)) for p in self.primitives):
            raise ValueError("primitives must include at least one surface (plate/ramp/step/cylinder)")
        return self

    @classmethod
    def load(cls, path) -> "TerrainSpec":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise TerrainError(f"spec not found: {path}") from None
        return cls.model_validate_json(text)


def _grid(r0: Range, r1: Range, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    nx = max(1, int(round((r0[1] - r0[0]) / spacing)))
    ny = max(1, int(round((r1[1] - r1[0]) / spacing)))
    a = r0[0] + (np.arange(nx) + 0.5) * (r0[1] - r0[0]) / nx
    b = r1[0] + (np.arange(ny) + 0.5) * (r1[1] - r1[0]) / ny
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.ravel(), B.ravel()


def _surface_points(p, spacing: float) -> np.ndarray:
    if isinstance(p, Plate):
        x, y = _grid(p.x, p.y, spacing)
        return np.column_stack([x, y, np.full_like(x, p.z)])
    if isinstance(p, Ramp):
        x, y = _grid(p.x, p.y, spacing)
        t = math.tan(math.radians(p.angle_deg))
        s = {"x": x - p.x[0], "y": y - p.y[0], "-x": p.x[1] - x, "-y": p.y[1] - y}[p.axis]
        return np.column_stack([x, y, p.z0 + t * s])
    if isinstance(p, Step):
        x, y = _grid(p.x, p.y, spacing)
        s = x if p.axis == "x" else y
        z = np.where(s < p.at, p.z0, p.z0 + p.height)
        pts = [np.column_stack([x, y, z])]
        nz = int(abs(p.height) // spacing)
        if nz > 0:
            other = y if p.axis == "x" else x
            other = np.unique(other)
            zs = p.z0 + np.sign(p.height) * spacing * np.arange(1, nz + 1)
            O, Z = np.meshgrid(other, zs, indexing="ij")
            S = np.full(O.size, p.at)
            riser = np.column_stack([S, O.ravel(), Z.ravel()] if p.axis == "x" else [O.ravel(), S, Z.ravel()])
            pts.append(riser)
        return np.vstack(pts)
    if isinstance(p, Cylinder):
        cx, cy = p.center
        n_ang = max(8, int(math.ceil(2 * math.pi * p.radius / spacing)))
        ang = 2 * math.pi * np.arange(n_ang) / n_ang
        zs = p.z0 + spacing * np.arange(int(p.height // spacing) + 1)
        A, Z = np.meshgrid(ang, zs, indexing="ij")
        side = np.column_stack([cx + p.radius * np.cos(A.ravel()), cy + p.radius * np.sin(A.ravel()), Z.ravel()])
        x, y = _grid((cx - p.radius, cx + p.radius), (cy - p.radius, cy + p.radius), spacing)
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= p.radius ** 2
        top = np.column_stack([x[inside], y[inside], np.full(inside.sum(), p.z0 + p.height)])
        return np.vstack([side, top])
    raise TypeError(p)


def synthesize_terrain(spec: TerrainSpec) -> PointCloud:
    """Build the point cloud for ``spec``; deterministic in (spec, seed).

    Surfaces are unioned first, then modifiers (bumps, corrugation) displace the
    points inside their footprints, then holes delete points.
    """
    rng = np.random.default_rng(spec.seed)
    surfaces = [_surface_points(p, spec.spacing) for p in spec.primitives
                if isinstance(p, (Plate, Ramp, Step, Cylinder))]
    pts = np.vstack(surfaces)
    for p in spec.primitives:
        if isinstance(p, Bumps):
            cx = rng.uniform(p.x[0], p.x[1], p.count)
            cy = rng.uniform(p.y[0], p.y[1], p.count)
            m = p.contains(pts)
            sub = pts[m]
            dz = np.zeros(len(sub))
            for bx, by in zip(cx, cy):
                dz += p.amplitude * np.exp(-((sub[:, 0] - bx) ** 2 + (sub[:, 1] - by) ** 2) / (2 * p.sigma ** 2))
            pts[m, 2] += dz
        elif isinstance(p, Corrugation):
            m = p.contains(pts)
            s = pts[m, 0] if p.axis == "x" else pts[m, 1]
            pts[m, 2] += p.amplitude * np.sin(2 * math.pi * s / p.wavelength)
    if spec.noise_std > 0:
        pts[:, 2] += rng.normal(0.0, spec.noise_std, len(pts))
    keep = np.ones(len(pts), dtype=bool)
    for p in spec.primitives:
        if isinstance(p, Hole):
            keep &= ~p.contains(pts)
    pts = pts[keep]
    if len(pts) == 0:
        raise TerrainError("terrain spec produced no points")
    return PointCloud(pts)
