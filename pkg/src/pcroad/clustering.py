"""Depth clustering over the non-ground cells of a range image.

Two neighbouring returns at ranges d1 >= d2, separated by beam angle alpha,
are merged when the angle

    beta = atan(d2 sin(alpha) / (d1 - d2 cos(alpha)))

exceeds ``theta``. Small beta means the second point lies far behind the
first along the beam, i.e. a depth discontinuity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .ground import GroundMask
from .projection import OrganizedCloud


@dataclass(frozen=True)
class ClusterConfig:
    theta: float = math.radians(10.0)
    window_h: int = 2
    window_w: int = 3
    min_cluster_points: int = 10

    def __post_init__(self):
        if not 0 < self.theta < math.pi / 2:
            raise ValueError("theta must lie in (0, pi/2)")
        if self.window_h < 1 or self.window_w < 1:
            raise ValueError("search window must be at least 1x1")


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


def merge_angle(d1: float, d2: float, alpha: float) -> float:
    if not (d1 >= d2 > 0):
        raise ValueError(f"merge_angle needs d1 >= d2 > 0, got {d1}, {d2}")
    return math.atan2(d2 * math.sin(alpha), d1 - d2 * math.cos(alpha))


def neighbour_angle(di: int, dj: int, alpha_v: float, alpha_h: float) -> float:
    """Beam separation for a (row, column) offset.

    Axis-aligned offsets use gap * per-cell step; diagonal offsets combine the
    two steps in quadrature.
    """
    return math.hypot(di * alpha_v, dj * alpha_h)


@numba.njit(cache=True)
def _bfs_label(rng, candidate, wh, ww, alpha_v, alpha_h, theta):
    h, w = rng.shape
    labels = np.zeros((h, w), dtype=np.int64)
    queue_r = np.empty(h * w, dtype=np.int64)
    queue_c = np.empty(h * w, dtype=np.int64)
    n_off = (2 * wh + 1) * (2 * ww + 1) - 1
    off_r = np.empty(n_off, dtype=np.int64)
    off_c = np.empty(n_off, dtype=np.int64)
    sin_a = np.empty(n_off)
    cos_a = np.empty(n_off)
    k = 0
    for di in range(-wh, wh + 1):
        for dj in range(-ww, ww + 1):
            if di == 0 and dj == 0:
                continue
            a = math.hypot(di * alpha_v, dj * alpha_h)
            off_r[k] = di
            off_c[k] = dj
            sin_a[k] = math.sin(a)
            cos_a[k] = math.cos(a)
            k += 1

    label = 0
    for r0 in range(h):
        for c0 in range(w):
            if not candidate[r0, c0] or labels[r0, c0] != 0:
                continue
            label += 1
            labels[r0, c0] = label
            head = 0
            tail = 1
            queue_r[0] = r0
            queue_c[0] = c0
            while head < tail:
                r = queue_r[head]
                c = queue_c[head]
                head += 1
                d_here = rng[r, c]
                for k in range(n_off):
                    rn = r + off_r[k]
                    if rn < 0 or rn >= h:
                        continue
                    cn = (c + off_c[k]) % w
                    if not candidate[rn, cn] or labels[rn, cn] != 0:
                        continue
                    d_there = rng[rn, cn]
                    d1 = max(d_here, d_there)
                    d2 = min(d_here, d_there)
                    beta = math.atan2(d2 * sin_a[k], d1 - d2 * cos_a[k])
                    if beta > theta:
                        labels[rn, cn] = label
                        queue_r[tail] = rn
                        queue_c[tail] = cn
                        tail += 1
    return labels


def relabel_by_size(labels: np.ndarray, min_points: int) -> np.ndarray:
    """Drop clusters below ``min_points`` and renumber the rest 1..K in id order."""
    counts = np.bincount(labels.ravel())
    keep = counts >= min_points
    keep[0] = False
    new_ids = np.zeros(len(counts), dtype=np.int64)
    new_ids[keep] = np.arange(1, int(keep.sum()) + 1)
    return new_ids[labels]


def cluster_depth(cloud: OrganizedCloud, ground: GroundMask,
                  cfg: ClusterConfig | None = None) -> ClusterLabels:
    """BFS depth clustering of valid, non-ground cells (columns wrap)."""
    cfg = cfg or ClusterConfig()
    if ground.mask.shape != cloud.shape:
        raise ValueError("cloud and ground mask shapes differ")
    candidate = np.asarray(cloud.valid) & ~np.asarray(ground.mask)
    pcfg = cloud.config
    raw = _bfs_label(np.ascontiguousarray(cloud.range), np.ascontiguousarray(candidate),
                     cfg.window_h, cfg.window_w, pcfg.alpha_v, pcfg.alpha_h, cfg.theta)
    return ClusterLabels(relabel_by_size(raw, cfg.min_cluster_points))
