"""Ground segmentation: filter-sampled per-sector RANSAC planes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numba
import numpy as np

from .projection import OrganizedCloud

DENOM_EPS = 1e-6

# SemanticKITTI classes counted as ground: road, parking, sidewalk, other-ground, terrain.
SEMANTIC_KITTI_GROUND = (40, 44, 48, 49, 72)


class NoPlane(Exception):
    """A sector had too few usable samples for a plane fit."""


@dataclass(frozen=True)
class GroundConfig:
    f_th1: float = 0.25
    f_th2: float = 0.5
    p_th: float = 0.2
    n_sectors: int = 32
    ransac_iters: int = 25
    ransac_inlier_th: float = 0.2
    min_samples: int = 40

    def __post_init__(self):
        if min(self.f_th1, self.f_th2, self.p_th, self.ransac_inlier_th) <= 0:
            raise ValueError("ground thresholds must be positive")
        if self.n_sectors < 1 or self.ransac_iters < 1:
            raise ValueError("n_sectors and ransac_iters must be >= 1")


@dataclass(frozen=True)
class PlaneModel:
    a1: float
    a2: float
    a3: float
    a4: float
    sector: int = 0
    inlier_count: int = 0

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3, self.a4])

    def distance(self, x, y, z):
        return point_plane_distance(self.coefficients, x, y, z)


@dataclass(frozen=True, eq=False)
class GroundMask:
    mask: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if np.any(self.mask & ~self.valid):
            raise ValueError("ground mask marks invalid cells")


class NormalProxies(NamedTuple):
    f_y: np.ndarray
    f_x: np.ndarray
    computable: np.ndarray


def point_plane_distance(coeffs, x, y, z):
    """Signed distance of points to the plane a1 x + a2 y + a3 z + a4 = 0."""
    a1, a2, a3, a4 = coeffs
    return (a1 * x + a2 * y + a3 * z + a4) / np.sqrt(a1 * a1 + a2 * a2 + a3 * a3)


@numba.njit(inline="always", error_model="numpy")
def _proxy_cell(R, Z, V, f_y, f_x, comp, r, r1, has_below, cm, c, c1, c2, eps):
    # Branch-free so the interior loop vectorizes; V is a uint8 view of the mask.
    ok_h = V[r, cm] & V[r, c] & V[r, c1] & V[r, c2]
    f_x[r, c] = (R[r, cm] + 2.0 * R[r, c] - 2.0 * R[r, c1] - R[r, c2]) * ok_h
    dr = 2.0 * R[r, c] + R[r, c1] - 2.0 * R[r1, c] - R[r1, c1]
    dz = 2.0 * Z[r, c] + Z[r, c1] - 2.0 * Z[r1, c] - Z[r1, c1]
    ok = ok_h & V[r1, c] & V[r1, c1] & has_below & np.uint8(abs(dr) >= eps)
    f_y[r, c] = dz / (dr if ok else 1.0) * ok
    comp[r, c] = ok


@numba.njit(cache=True, error_model="numpy")
def _proxies_kernel(R, Z, V, eps):
    h, w = R.shape
    f_y = np.empty((h, w))
    f_x = np.empty((h, w))
    comp = np.empty((h, w), dtype=np.bool_)
    for r in range(h):
        r1 = r + 1 if r + 1 < h else r
        has_below = np.uint8(1 if r + 1 < h else 0)
        for c in range(1, w - 2):
            _proxy_cell(R, Z, V, f_y, f_x, comp, r, r1, has_below, c - 1, c, c + 1, c + 2, eps)
        # Seam columns, where taps wrap around.
        for c in range(w):
            if 1 <= c < w - 2:
                continue
            _proxy_cell(R, Z, V, f_y, f_x, comp, r, r1, has_below,
                        (c - 1) % w, c, (c + 1) % w, (c + 2) % w, eps)
    return f_y, f_x, comp


def normal_proxies(R: np.ndarray, Z: np.ndarray, valid: np.ndarray) -> NormalProxies:
    """Slope (dZ/dR down a column) and horizontal range derivative per cell.

    The vertical kernel [[2, 1], [-2, -1]] is anchored at its top-left tap, so
    cell (r, c) reads rows r, r+1 and columns c, c+1. The horizontal kernel
    [1, 2, -2, -1] is anchored at its second tap (columns c-1..c+2). Columns
    wrap at the azimuth seam, rows do not. A cell is computable only when all
    taps of both kernels are valid and |S_v * R| >= DENOM_EPS; F_y is 0
    elsewhere, F_x is 0 wherever a horizontal tap is invalid.
    """
    R = np.ascontiguousarray(R, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=bool).view(np.uint8)
    return NormalProxies(*_proxies_kernel(R, Z, valid, DENOM_EPS))


def sector_width(n_cols: int, cfg: GroundConfig) -> int:
    if n_cols % cfg.n_sectors:
        raise ValueError(f"{cfg.n_sectors} sectors do not divide {n_cols} columns")
    return n_cols // cfg.n_sectors


def sample_mask(f_y, f_x, computable, cfg: GroundConfig) -> np.ndarray:
    return computable & (np.abs(f_y) <= cfg.f_th1) & (np.abs(f_x) <= cfg.f_th2)


@numba.njit(cache=True)
def _collect(X, Y, Z, f_y, f_x, computable, th1, th2, n_sectors):
    h, w = computable.shape
    mask = np.empty((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            mask[r, c] = computable[r, c] & (abs(f_y[r, c]) <= th1) & (abs(f_x[r, c]) <= th2)
    sw = w // n_sectors
    bounds = np.zeros(n_sectors + 1, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                bounds[c // sw + 1] += 1
    for k in range(n_sectors):
        bounds[k + 1] += bounds[k]
    out = np.empty((bounds[n_sectors], 3))
    for k in range(n_sectors):
        i = bounds[k]
        for r in range(h):
            for c in range(k * sw, (k + 1) * sw):
                if mask[r, c]:
                    out[i, 0] = X[r, c]
                    out[i, 1] = Y[r, c]
                    out[i, 2] = Z[r, c]
                    i += 1
    return out, bounds


def sample_ground(f_y, f_x, cloud: OrganizedCloud, cfg: GroundConfig,
                  computable: np.ndarray | None = None) -> list[np.ndarray]:
    """Cartesian coordinates of likely-ground cells, one (n, 3) array per sector.

    Within a sector, samples are in row-major cell order.
    """
    if computable is None:
        computable = normal_proxies(cloud.R, cloud.Z, cloud.valid).computable
    sector_width(computable.shape[1], cfg)
    pts, bounds = _collect(cloud.X, cloud.Y, cloud.Z, np.asarray(f_y, dtype=np.float64),
                           np.asarray(f_x, dtype=np.float64), np.asarray(computable, dtype=bool),
                           cfg.f_th1, cfg.f_th2, cfg.n_sectors)
    return [pts[bounds[k]:bounds[k + 1]] for k in range(cfg.n_sectors)]


_MASK64 = (1 << 64) - 1


@numba.njit(cache=True)
def _splitmix64(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15))
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def draw_triples(seed, n, iters):
    """``iters`` x 3 sample indices in [0, n) from a splitmix64 stream."""
    state = np.uint64(seed)
    tri = np.empty((iters, 3), dtype=np.int64)
    for i in range(iters):
        for j in range(3):
            state, z = _splitmix64(state)
            tri[i, j] = np.int64((z >> np.uint64(11)) % np.uint64(n))
    return tri


@numba.njit(cache=True)
def _ransac_core(pts, tri, th):
    """Best candidate plane over the drawn triples plus its inlier scatter.

    Returns (inlier count, inlier mean, inlier scatter matrix); count is -1
    when every triple was degenerate.
    """
    n = pts.shape[0]
    xs = np.ascontiguousarray(pts[:, 0])
    ys = np.ascontiguousarray(pts[:, 1])
    zs = np.ascontiguousarray(pts[:, 2])
    best = -1
    bn = np.zeros(3)
    bd = 0.0
    for it in range(tri.shape[0]):
        i0, i1, i2 = tri[it, 0], tri[it, 1], tri[it, 2]
        ax, ay, az = xs[i1] - xs[i0], ys[i1] - ys[i0], zs[i1] - zs[i0]
        bx, by, bz = xs[i2] - xs[i0], ys[i2] - ys[i0], zs[i2] - zs[i0]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
        nn = math.sqrt(nx * nx + ny * ny + nz * nz)
        scale = math.sqrt((ax * ax + ay * ay + az * az) * (bx * bx + by * by + bz * bz))
        if not nn > 1e-9 * scale:
            continue
        nx /= nn
        ny /= nn
        nz /= nn
        d = -(nx * xs[i0] + ny * ys[i0] + nz * zs[i0])
        c = 0
        for j in range(n):
            v = nx * xs[j] + ny * ys[j] + nz * zs[j] + d
            c += (v <= th) & (v >= -th)
        if c > best:
            best = c
            bn[0], bn[1], bn[2] = nx, ny, nz
            bd = d
    mean = np.zeros(3)
    scatter = np.zeros((3, 3))
    if best <= 0:
        return best, mean, scatter
    inl = np.empty(n, dtype=np.bool_)
    for j in range(n):
        v = bn[0] * xs[j] + bn[1] * ys[j] + bn[2] * zs[j] + bd
        inl[j] = (v <= th) & (v >= -th)
    mx = my = mz = 0.0
    for j in range(n):
        if inl[j]:
            mx += xs[j]
            my += ys[j]
            mz += zs[j]
    mx /= best
    my /= best
    mz /= best
    sxx = sxy = sxz = syy = syz = szz = 0.0
    for j in range(n):
        if inl[j]:
            qx, qy, qz = xs[j] - mx, ys[j] - my, zs[j] - mz
            sxx += qx * qx
            sxy += qx * qy
            sxz += qx * qz
            syy += qy * qy
            syz += qy * qz
            szz += qz * qz
    mean[0], mean[1], mean[2] = mx, my, mz
    scatter[0, 0], scatter[0, 1], scatter[0, 2] = sxx, sxy, sxz
    scatter[1, 0], scatter[1, 1], scatter[1, 2] = sxy, syy, syz
    scatter[2, 0], scatter[2, 1], scatter[2, 2] = sxz, syz, szz
    return best, mean, scatter


def _plane(normal, mean, sector, count) -> PlaneModel:
    plane = np.append(normal, -normal @ mean)
    if plane[2] < 0:
        plane = -plane
    return PlaneModel(*map(float, plane), sector=sector, inlier_count=int(count))


def fit_plane_ransac(samples: np.ndarray, cfg: GroundConfig, rng_seed: int,
                     sector: int = 0) -> PlaneModel:
    """RANSAC plane fit over one sector's samples, refined by least squares."""
    pts = np.ascontiguousarray(samples, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < max(cfg.min_samples, 3):
        raise NoPlane(f"sector {sector}: {n} samples")
    tri = draw_triples(np.uint64(rng_seed & _MASK64), n, cfg.ransac_iters)
    count, mean, scatter = _ransac_core(pts, tri, cfg.ransac_inlier_th)
    if count < 0:
        raise NoPlane(f"sector {sector}: all draws degenerate")
    if count < 3:
        raise NoPlane(f"sector {sector}: no consensus")
    # Least-squares refit: normal = eigenvector of the smallest scatter eigenvalue.
    return _plane(np.linalg.eigh(scatter)[1][:, 0], mean, sector, count)


@numba.njit(cache=True)
def _ransac_sectors(pts, bounds, seeds, iters, th, min_n):
    """:func:`fit_plane_ransac` minus the refit, for every sector in one call."""
    k = bounds.shape[0] - 1
    counts = np.full(k, -1, dtype=np.int64)
    means = np.zeros((k, 3))
    scatters = np.zeros((k, 3, 3))
    for s in range(k):
        n = bounds[s + 1] - bounds[s]
        if n < min_n:
            continue
        tri = draw_triples(seeds[s], n, iters)
        counts[s], means[s], scatters[s] = _ransac_core(pts[bounds[s]:bounds[s + 1]], tri, th)
    return counts, means, scatters


def _fit_all(pts, bounds, cfg: GroundConfig, rng_seed: int) -> list[PlaneModel]:
    seeds = np.array([(rng_seed + k) & _MASK64 for k in range(cfg.n_sectors)], dtype=np.uint64)
    counts, means, scatters = _ransac_sectors(pts, bounds, seeds, cfg.ransac_iters,
                                              cfg.ransac_inlier_th, max(cfg.min_samples, 3))
    ok = np.flatnonzero(counts >= 3)
    if not len(ok):
        return []
    normals = np.linalg.eigh(scatters[ok])[1][:, :, 0]
    return [_plane(normals[j], means[k], int(k), counts[k]) for j, k in enumerate(ok)]


def _fit_sector(args):
    samples, cfg, seed, sector = args
    try:
        return fit_plane_ransac(samples, cfg, seed, sector)
    except NoPlane:
        return None


@numba.njit(cache=True)
def _plane_mask(X, Y, Z, valid, coeffs, fitted, sw, p_th):
    h, w = valid.shape
    mask = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for k in range(coeffs.shape[0]):
            if not fitted[k]:
                continue
            a1, a2, a3, a4 = coeffs[k, 0], coeffs[k, 1], coeffs[k, 2], coeffs[k, 3]
            for c in range(k * sw, (k + 1) * sw):
                mask[r, c] = valid[r, c] & (abs(a1 * X[r, c] + a2 * Y[r, c] + a3 * Z[r, c] + a4) < p_th)
    return mask


def segment_ground(cloud: OrganizedCloud, cfg: GroundConfig | None = None, rng_seed: int = 0,
                   map_fn: Callable | None = None) -> tuple[GroundMask, list[PlaneModel]]:
    """Label ground cells of ``cloud``.

    Sector fits are independent; pass an executor's ``map`` as ``map_fn`` to
    run them in parallel (the default fits every sector in one compiled
    loop). Sector k is seeded with ``rng_seed + k`` either way.
    """
    cfg = cfg or GroundConfig()
    h, w = cloud.shape
    sw = sector_width(w, cfg)
    proxies = normal_proxies(cloud.R, cloud.Z, cloud.valid)
    pts, bounds = _collect(cloud.X, cloud.Y, cloud.Z, proxies.f_y, proxies.f_x, proxies.computable,
                           cfg.f_th1, cfg.f_th2, cfg.n_sectors)
    if map_fn is None:
        planes = _fit_all(pts, bounds, cfg, rng_seed)
    else:
        jobs = [(pts[bounds[k]:bounds[k + 1]], cfg, rng_seed + k, k) for k in range(cfg.n_sectors)]
        planes = [p for p in map_fn(_fit_sector, jobs) if p is not None]

    coeffs = np.zeros((cfg.n_sectors, 4))
    fitted = np.zeros(cfg.n_sectors, dtype=bool)
    for p in planes:
        c = p.coefficients
        coeffs[p.sector] = c / np.linalg.norm(c[:3])
        fitted[p.sector] = True
    mask = _plane_mask(cloud.X, cloud.Y, cloud.Z, cloud.valid, coeffs, fitted, sw, cfg.p_th)
    return GroundMask(mask, np.asarray(cloud.valid)), planes


def read_semantickitti_labels(path, ground_ids=SEMANTIC_KITTI_GROUND) -> np.ndarray:
    """Per-point ground flags from a SemanticKITTI ``.label`` file."""
    raw = np.fromfile(path, dtype="<u4")
    semantic = raw & 0xFFFF
    return np.isin(semantic, np.asarray(ground_ids, dtype=np.uint32))


def write_semantickitti_labels(path, semantic: np.ndarray) -> None:
    np.asarray(semantic, dtype="<u4").tofile(path)
