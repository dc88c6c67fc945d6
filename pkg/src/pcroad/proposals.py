"""Cluster -> fixed-size, canonicalized network input."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterLabels
from .projection import OrganizedCloud


@dataclass(frozen=True)
class ProposalConfig:
    n_points: int = 64
    max_range: float = 60.0
    voxel_res: tuple[float, float, float] = (10.0, 10.0, 1.0)  # azimuth deg, elevation deg, range m

    def __post_init__(self):
        if self.n_points < 16:
            raise ValueError("n_points must be >= 16")
        if min(self.voxel_res) <= 0:
            raise ValueError("voxel resolution must be positive")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        az, el, r = self.voxel_res
        return (math.ceil(360.0 / az), math.ceil(180.0 / el), max(1, math.ceil(self.max_range / r)))


@dataclass(frozen=True)
class VoxelCoord:
    azimuth_idx: int
    elevation_idx: int
    range_idx: int
    azimuth_center: float    # rad
    elevation_center: float  # rad
    range_center: float      # m

    def features(self, max_range: float) -> np.ndarray:
        """Normalized cell-centre features fed to the location encoder."""
        return np.array([self.azimuth_center / math.pi,
                         self.elevation_center / (math.pi / 2),
                         self.range_center / max_range])


@dataclass(frozen=True, eq=False)
class Proposal:
    points: np.ndarray            # (N, 3) raw
    mean: np.ndarray              # (3,)
    r_m: float
    canonical_points: np.ndarray  # (M, 3)
    voxel: VoxelCoord
    cluster_id: int
    voxel_features: np.ndarray    # (3,)

    @property
    def azimuth(self) -> float:
        return math.atan2(self.mean[1], self.mean[0])


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonicalize(points, mean) -> np.ndarray:
    """Centre on ``mean`` and rotate so the mean's azimuth maps onto +x."""
    pts = np.asarray(points, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    rot = yaw_rotation(-math.atan2(mean[1], mean[0]))
    return (pts - mean) @ rot.T


def voxelize_mean(mean, cfg: ProposalConfig | None = None) -> VoxelCoord:
    """Spherical voxel cell of a proposal mean. Angles are binned in degrees."""
    cfg = cfg or ProposalConfig()
    x, y, z = (float(v) for v in mean)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        raise ValueError("cannot voxelize a zero-norm mean")
    res_az, res_el, res_r = cfg.voxel_res
    n_az, n_el, n_r = cfg.grid_shape
    az_deg = math.degrees(math.atan2(y, x)) + 180.0
    el_deg = math.degrees(math.asin(max(-1.0, min(1.0, z / r)))) + 90.0
    az_idx = int(math.floor(az_deg / res_az)) % n_az
    el_idx = min(int(math.floor(el_deg / res_el)), n_el - 1)
    r_idx = min(int(math.floor(r / res_r)), n_r - 1)
    return VoxelCoord(
        az_idx, el_idx, r_idx,
        math.radians((az_idx + 0.5) * res_az - 180.0),
        math.radians((el_idx + 0.5) * res_el - 90.0),
        (r_idx + 0.5) * res_r,
    )


def resample_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``m`` indices into ``n`` points.

    Without replacement when n > m; otherwise every point once plus ``m - n``
    draws with replacement, so no original point is lost.
    """
    if n > m:
        return rng.choice(n, size=m, replace=False)
    if n == m:
        return np.arange(n)
    return np.concatenate([np.arange(n), rng.integers(0, n, size=m - n)])


def make_proposal(points: np.ndarray, cluster_id: int, cfg: ProposalConfig,
                  rng: np.random.Generator) -> Proposal:
    pts = np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0)
    r_m = float(np.linalg.norm(mean))
    sample = pts[resample_indices(len(pts), cfg.n_points, rng)]
    voxel = voxelize_mean(mean, cfg)
    return Proposal(pts, mean, r_m, canonicalize(sample, mean), voxel, int(cluster_id),
                    voxel.features(cfg.max_range))


def extract_proposals(cloud: OrganizedCloud, labels: ClusterLabels,
                      cfg: ProposalConfig | None = None, seed: int = 0) -> list[Proposal]:
    cfg = cfg or ProposalConfig()
    flat = labels.labels.ravel()
    n_clusters = int(flat.max()) if flat.size else 0
    if n_clusters == 0:
        return []
    cells = np.flatnonzero(flat)
    order = cells[np.argsort(flat[cells], kind="stable")]
    bounds = np.searchsorted(flat[order], np.arange(1, n_clusters + 2))
    xyz = np.stack([cloud.X.ravel()[order], cloud.Y.ravel()[order], cloud.Z.ravel()[order]], axis=1)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(1, n_clusters + 1):
        pts = xyz[bounds[k - 1]:bounds[k]]
        if np.linalg.norm(pts.mean(axis=0)) > cfg.max_range:
            continue
        out.append(make_proposal(pts, k, cfg, rng))
    return out


def write_proposals(path, proposals: list[Proposal], payload_path=None) -> None:
    """Text dump, one line per proposal; raw points optionally go to a float32 payload."""
    with open(path, "w") as fh:
        for p in proposals:
            v = p.voxel
            fh.write(f"{p.cluster_id} {len(p.points)} {p.mean[0]:.6f} {p.mean[1]:.6f} {p.mean[2]:.6f} "
                     f"{v.azimuth_idx} {v.elevation_idx} {v.range_idx}\n")
    if payload_path is not None:
        with open(payload_path, "wb") as fh:
            for p in proposals:
                fh.write(np.asarray(p.points, dtype="<f4").tobytes())


def read_proposals(path, payload_path=None) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            f = line.split()
            if not f:
                continue
            rows.append({"cluster_id": int(f[0]), "n": int(f[1]),
                         "mean": np.array([float(v) for v in f[2:5]]),
                         "voxel": tuple(int(v) for v in f[5:8])})
    if payload_path is not None:
        data = np.fromfile(payload_path, dtype="<f4").reshape(-1, 3)
        start = 0
        for row in rows:
            row["points"] = data[start:start + row["n"]].astype(np.float64)
            start += row["n"]
    return rows
