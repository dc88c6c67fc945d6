"""Small raycasting LiDAR simulator for synthetic scans.

Rays leave the origin through the centre of every range-image cell, so a
rendered scan projects back onto the grid it was cast from. Scenes are a
ground plane plus a list of primitives (oriented boxes, vertical elliptic
cylinders, ellipsoids).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .projection import ProjectionConfig

SENSOR_HEIGHT = 1.73
MAX_RANGE = 120.0


def _local(dirs, center, yaw):
    """Ray origin (the sensor) and directions in a primitive's yaw-aligned frame."""
    c, s = math.cos(yaw), math.sin(yaw)
    o = -np.asarray(center, dtype=np.float64)
    o = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    return o, d


def _safe(d):
    return np.where(np.abs(d) < 1e-12, np.copysign(1e-12, d), d)


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray  # l, w, h
    yaw: float = 0.0

    @property
    def radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.size))

    def intersect(self, dirs):
        o, d = _local(dirs, self.center, self.yaw)
        h = np.asarray(self.size) / 2.0
        inv = 1.0 / _safe(d)
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


@dataclass
class Cylinder:
    """Vertical elliptic cylinder; ``radii`` along the local x/y axes, z in [z0, z1]."""

    center_xy: np.ndarray
    radii: tuple[float, float]
    z0: float
    z1: float
    yaw: float = 0.0

    @property
    def center(self):
        return np.array([self.center_xy[0], self.center_xy[1], 0.5 * (self.z0 + self.z1)])

    @property
    def radius(self) -> float:
        return math.hypot(max(self.radii), 0.5 * (self.z1 - self.z0))

    def intersect(self, dirs):
        o, d = _local(dirs, [self.center_xy[0], self.center_xy[1], 0.0], self.yaw)
        a, b = self.radii
        ox, oy = o[0] / a, o[1] / b
        dx, dy = d[:, 0] / a, d[:, 1] / b
        qa = dx * dx + dy * dy
        qb = 2 * (ox * dx + oy * dy)
        qc = ox * ox + oy * oy - 1.0
        disc = qb * qb - 4 * qa * qc
        with np.errstate(invalid="ignore", divide="ignore"):
            t_side = (-qb - np.sqrt(disc)) / (2 * qa)
        z = o[2] + t_side * d[:, 2]
        side_ok = (disc >= 0) & (t_side > 0) & (z >= self.z0) & (z <= self.z1)
        t = np.where(side_ok, t_side, np.inf)
        for zc in (self.z0, self.z1):
            tc = (zc - o[2]) / _safe(d[:, 2])
            px, py = (o[0] + tc * d[:, 0]) / a, (o[1] + tc * d[:, 1]) / b
            ok = (tc > 0) & (px * px + py * py <= 1.0)
            t = np.where(ok & (tc < t), tc, t)
        return t


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    yaw: float = 0.0

    @property
    def radius(self) -> float:
        return float(np.max(self.radii))

    def intersect(self, dirs):
        o, d = _local(dirs, self.center, self.yaw)
        r = np.asarray(self.radii, dtype=np.float64)
        o, d = o / r, d / r
        qa = (d * d).sum(axis=1)
        qb = 2 * (d @ o)
        qc = o @ o - 1.0
        disc = qb * qb - 4 * qa * qc
        with np.errstate(invalid="ignore"):
            t = (-qb - np.sqrt(disc)) / (2 * qa)
        return np.where((disc >= 0) & (t > 0), t, np.inf)


@dataclass
class Ground:
    """Plane n . p = offset with an upward unit normal."""

    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = -SENSOR_HEIGHT

    @classmethod
    def tilted(cls, tilt: float, direction: float, height: float = SENSOR_HEIGHT) -> "Ground":
        """Plane through (0, 0, -height) rising by ``tilt`` rad towards azimuth ``direction``."""
        n = np.array([-math.sin(tilt) * math.cos(direction), -math.sin(tilt) * math.sin(direction),
                      math.cos(tilt)])
        return cls(n, -height * n[2])

    def height_at(self, x, y):
        n = self.normal
        return (self.offset - n[0] * x - n[1] * y) / n[2]

    def intersect(self, dirs):
        den = dirs @ self.normal
        with np.errstate(divide="ignore"):
            t = self.offset / den
        return np.where((den < 0) & (t > 0), t, np.inf)

    def distance(self, pts):
        return pts @ self.normal - self.offset


def ray_directions(cfg: ProjectionConfig) -> np.ndarray:
    """(H, W, 3) unit directions through every cell centre."""
    el = cfg.row_elevations()[:, None]
    az = cfg.column_azimuths()[None, :]
    return np.stack(np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)),
                    axis=-1)


def _column_window(obj, cfg: ProjectionConfig) -> np.ndarray:
    c = obj.center
    dist = math.hypot(c[0], c[1])
    rad = obj.radius + 0.05
    if dist <= rad * 1.05:
        return np.arange(cfg.s_w)
    half = math.asin(rad / dist)
    az = math.atan2(c[1], c[0])
    u_of = lambda a: 0.5 * (1.0 - a / math.pi) * cfg.s_w
    lo = math.floor(u_of(az + half)) - 1
    hi = math.ceil(u_of(az - half)) + 1
    return np.arange(lo, hi + 1) % cfg.s_w


@dataclass
class Scan:
    points: np.ndarray   # (N, 3)
    labels: np.ndarray   # (N,) 0 = ground, k = object index + 1
    config: ProjectionConfig


def render(objects, cfg: ProjectionConfig, ground: Ground | None = Ground(),
           max_range: float = MAX_RANGE, rng: np.random.Generator | None = None,
           z_noise: float = 0.0) -> Scan:
    """Cast one ray per cell against ``ground`` and ``objects``; nearest hit wins."""
    dirs = ray_directions(cfg)
    flat = dirs.reshape(-1, 3)
    if ground is not None:
        t = ground.intersect(flat).reshape(cfg.s_h, cfg.s_w)
    else:
        t = np.full((cfg.s_h, cfg.s_w), np.inf)
    lab = np.zeros((cfg.s_h, cfg.s_w), dtype=np.int64)
    for k, obj in enumerate(objects):
        cols = _column_window(obj, cfg)
        sub = dirs[:, cols].reshape(-1, 3)
        tk = obj.intersect(sub).reshape(cfg.s_h, len(cols))
        cur = t[:, cols]
        closer = tk < cur
        t[:, cols] = np.where(closer, tk, cur)
        lab[:, cols] = np.where(closer, k + 1, lab[:, cols])
    hit = t <= max_range
    pts = dirs[hit] * t[hit][:, None]
    if z_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        pts[:, 2] += rng.normal(0.0, z_noise, size=len(pts))
    return Scan(pts, lab[hit], cfg)
