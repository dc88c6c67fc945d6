"""Organized range-image projection of LiDAR scans."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np


class InvalidPointError(ValueError):
    """Raised for input points that cannot be projected (zero norm, NaN)."""


@dataclass(frozen=True)
class ProjectionConfig:
    s_h: int = 64
    s_w: int = 2048
    f_up: float = math.radians(3.0)
    f_down: float = math.radians(25.0)

    def __post_init__(self):
        if self.s_h < 2 or self.s_w < 4:
            raise ValueError(f"projection too small: {self.s_h}x{self.s_w}")
        if self.f_up < 0 or self.f_down < 0 or self.f <= 0:
            raise ValueError("vertical field of view must be positive")

    @property
    def f(self) -> float:
        return self.f_up + self.f_down

    @property
    def alpha_h(self) -> float:
        """Azimuth step between neighbouring columns (rad)."""
        return 2.0 * math.pi / self.s_w

    @property
    def alpha_v(self) -> float:
        """Elevation step between neighbouring rows (rad)."""
        return self.f / self.s_h

    def row_elevations(self) -> np.ndarray:
        """Elevation of each row centre, top row first."""
        return self.f_up - (np.arange(self.s_h) + 0.5) * self.alpha_v

    def column_azimuths(self) -> np.ndarray:
        """Azimuth of each column centre; inverse of the column mapping."""
        return math.pi * (1.0 - 2.0 * (np.arange(self.s_w) + 0.5) / self.s_w)


@dataclass(frozen=True, eq=False)
class OrganizedCloud:
    """H x W projection of one scan.

    ``index`` holds the input-point index stored in each cell (-1 where the
    cell is empty) so per-point labels can be carried to the image.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    valid: np.ndarray
    index: np.ndarray
    config: ProjectionConfig = field(default_factory=ProjectionConfig)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @cached_property
    def range(self) -> np.ndarray:
        """Euclidean distance of every cell to the sensor origin (0 if empty)."""
        rng = np.sqrt(self.X * self.X + self.Y * self.Y + self.Z * self.Z)
        rng.flags.writeable = False
        return rng

    @classmethod
    def empty(cls, cfg: ProjectionConfig) -> "OrganizedCloud":
        return project_cloud(np.zeros((0, 3)), cfg)

    def points(self) -> np.ndarray:
        """Cartesian coordinates of valid cells in row-major order."""
        return np.stack([self.X[self.valid], self.Y[self.valid], self.Z[self.valid]], axis=1)


@numba.njit(cache=True)
def _cell_of(x, y, z, norm, s_h, s_w, f_up, f):
    p_u = math.floor(0.5 * (1.0 - math.atan2(y, x) / math.pi) * s_w)
    el = math.asin(min(1.0, max(-1.0, z / norm)))
    p_v = math.floor((f_up - el) / f * s_h)
    p_u = min(max(p_u, 0), s_w - 1)
    p_v = min(max(p_v, 0), s_h - 1)
    return p_v, p_u


@numba.njit(cache=True)
def _pixel_kernel(pts, s_h, s_w, f_up, f):
    n = pts.shape[0]
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    for i in range(n):
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        rows[i], cols[i] = _cell_of(x, y, z, math.sqrt(x * x + y * y + z * z), s_h, s_w, f_up, f)
    return rows, cols


@numba.njit(cache=True)
def _project_kernel(pts, s_h, s_w, f_up, f):
    """Nearest point per cell; on equal range the earlier point stays."""
    n_cells = s_h * s_w
    best = np.full(n_cells, np.inf)
    index = np.full(n_cells, -1, dtype=np.int64)
    for i in range(pts.shape[0]):
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        norm = math.sqrt(x * x + y * y + z * z)
        if norm == 0.0:
            return index, i
        v, u = _cell_of(x, y, z, norm, s_h, s_w, f_up, f)
        cell = v * s_w + u
        if norm < best[cell]:
            best[cell] = norm
            index[cell] = i
    return index, -1


@numba.njit(cache=True)
def _gather(pts, index, s_h, s_w):
    X = np.zeros((s_h, s_w))
    Y = np.zeros((s_h, s_w))
    Z = np.zeros((s_h, s_w))
    R = np.zeros((s_h, s_w))
    for r in range(s_h):
        for c in range(s_w):
            i = index[r * s_w + c]
            if i >= 0:
                X[r, c] = pts[i, 0]
                Y[r, c] = pts[i, 1]
                Z[r, c] = pts[i, 2]
                R[r, c] = math.sqrt(pts[i, 0] * pts[i, 0] + pts[i, 1] * pts[i, 1])
    return X, Y, Z, R


def pixel_coords(points: np.ndarray, cfg: ProjectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row (p_v) and column (p_u) of every point, clamped to the image."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    return _pixel_kernel(pts, cfg.s_h, cfg.s_w, cfg.f_up, cfg.f)


def project_cloud(points, cfg: ProjectionConfig | None = None) -> OrganizedCloud:
    """Project an (N, 3) point list onto the organized range image.

    When several points fall in one cell the nearest one is kept (ties go to
    the lowest input index).
    """
    cfg = cfg or ProjectionConfig()
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    finite = np.isfinite(pts)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.all(axis=1))[0])
        raise InvalidPointError(f"point {bad} has a non-finite coordinate")
    h, w = cfg.s_h, cfg.s_w
    index, bad = _project_kernel(pts, h, w, cfg.f_up, cfg.f)
    if bad >= 0:
        raise InvalidPointError(f"point {bad} has zero norm")
    X, Y, Z, R = _gather(pts, index, h, w)
    index = index.reshape(h, w)
    valid = index >= 0
    for a in (X, Y, Z, R, valid, index):
        a.flags.writeable = False
    return OrganizedCloud(X, Y, Z, R, valid, index, config=cfg)


def channels(cloud: OrganizedCloud):
    """Return the (X, Y, Z, R, valid) matrices of ``cloud`` (read-only views)."""
    return cloud.X, cloud.Y, cloud.Z, cloud.R, cloud.valid


def read_velodyne_bin(path) -> np.ndarray:
    """Read a KITTI velodyne ``.bin`` scan; returns (N, 3) xyz, intensity dropped."""
    scan = np.fromfile(path, dtype="<f4")
    if scan.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 4 floats")
    return scan.reshape(-1, 4)[:, :3].astype(np.float64)


def write_velodyne_bin(path, points: np.ndarray, intensity: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(pts), dtype="<f4")
    np.column_stack([pts, np.asarray(intensity, dtype="<f4")]).astype("<f4").tofile(path)
