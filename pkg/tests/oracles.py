"""Independent reference implementations used as test oracles.

They favour obviousness over speed: explicit loops, no shared helpers with
the package beyond plain data containers.
"""
from __future__ import annotations

import math

import numpy as np

from pcroad.networks import NetworkWeights
from pcroad.projection import OrganizedCloud, ProjectionConfig


# --- clustering ----------------------------------------------------------------------

class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def union_find_partition(rng_img, candidate, wh, ww, alpha_v, alpha_h, theta, min_points):
    """Connected components over every qualifying neighbour pair.

    Returns a list of frozensets of flat cell indices (clusters below
    ``min_points`` dropped).
    """
    h, w = rng_img.shape
    uf = UnionFind(h * w)
    for r in range(h):
        for c in range(w):
            if not candidate[r, c]:
                continue
            for di in range(-wh, wh + 1):
                for dj in range(-ww, ww + 1):
                    if di == 0 and dj == 0:
                        continue
                    rn, cn = r + di, (c + dj) % w
                    if not 0 <= rn < h or not candidate[rn, cn]:
                        continue
                    a = math.sqrt((di * alpha_v) ** 2 + (dj * alpha_h) ** 2)
                    d1 = max(rng_img[r, c], rng_img[rn, cn])
                    d2 = min(rng_img[r, c], rng_img[rn, cn])
                    if math.atan2(d2 * math.sin(a), d1 - d2 * math.cos(a)) > theta:
                        uf.union(r * w + c, rn * w + cn)
    groups: dict[int, set] = {}
    for r in range(h):
        for c in range(w):
            if candidate[r, c]:
                groups.setdefault(uf.find(r * w + c), set()).add(r * w + c)
    return {frozenset(g) for g in groups.values() if len(g) >= min_points}


def label_partition(labels):
    flat = np.asarray(labels).ravel()
    return {frozenset(np.flatnonzero(flat == k).tolist()) for k in range(1, int(flat.max(initial=0)) + 1)}


def cloud_from_ranges(ranges, valid, cfg: ProjectionConfig) -> OrganizedCloud:
    """Organized cloud whose cell (r, c) sits at range ``ranges[r, c]`` along that cell's beam."""
    h, w = ranges.shape
    elev = cfg.f_up - (np.arange(h) + 0.5) * cfg.f / h
    azim = math.pi * (1.0 - 2.0 * (np.arange(w) + 0.5) / w)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    d = np.where(valid, ranges, 0.0)
    X = d * np.cos(el) * np.cos(az)
    Y = d * np.cos(el) * np.sin(az)
    Z = d * np.sin(el)
    R = np.hypot(X, Y)
    index = np.where(valid, np.arange(h * w).reshape(h, w), -1)
    return OrganizedCloud(X, Y, Z, R, valid.copy(), index, config=cfg)


# --- dense networks -----------------------------------------------------------------

def _dense(x, W, b, act=True):
    out = [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]
    return [max(v, 0.0) for v in out] if act else out


def _mlp2(x, w, prefix):
    hid = _dense(x, w[f"{prefix}.w1"], w[f"{prefix}.b1"])
    return _dense(hid, w[f"{prefix}.w2"], w[f"{prefix}.b2"], act=False)


def _global(points, w):
    feats = []
    for p in points:
        h = _dense(list(p), w["enc.w1"], w["enc.b1"])
        h = _dense(h, w["enc.w2"], w["enc.b2"])
        feats.append(_dense(h, w["enc.w3"], w["enc.b3"]))
    return [max(f[j] for f in feats) for j in range(len(feats[0]))]


def _pvle(vox, w):
    return _dense(_dense(list(vox), w["pvle.w1"], w["pvle.b1"]), w["pvle.w2"], w["pvle.b2"])


def dense_classifier(points, vox, w: NetworkWeights):
    t = {k: v.tolist() for k, v in w.tensors.items()}
    z = _global(points, t) + (_pvle(vox, t) if w.pvle_enabled else [])
    return np.array(_mlp2(z, t, "head"))


def dense_box(points, vox, w: NetworkWeights):
    """(raw box output, tnet delta, rnet yaw) by explicit loops."""
    t = {k: v.tolist() for k, v in w.tensors.items()}
    v = _pvle(vox, t) if w.pvle_enabled else []
    z1 = _global(points, t) + v
    delta = _mlp2(z1, t, "tnet")
    yaw = _mlp2(z1, t, "rnet")[0]
    shifted = [[p[i] - delta[i] for i in range(3)] for p in points]
    out = _mlp2(_global(shifted, t) + v, t, "box")
    return np.array(out), np.array(delta), yaw


# --- finite differences -------------------------------------------------------------

def finite_difference_check(objective, w: NetworkWeights, batch, entries_per_tensor, rng, h=1e-4):
    """Compare analytic gradients with finite differences.

    Each entry uses a Richardson-extrapolated central difference (steps h
    and h / 2) when the +-h perturbation keeps every ReLU pattern, argmax
    and loss branch; otherwise a second-order one-sided difference on the
    smooth side, then the same with h / 100. Entries with a kink on both
    sides are skipped. The error denominator never drops below
    1e5 * eps * |loss| / h, so a gradient lost in rounding passes when it
    is within ten rounding units of the quotient. Returns (worst relative
    error, number checked, number skipped, per-tensor checked counts).
    """
    loss, grads = objective.value_and_grad(w, batch)
    base_sig = objective.signature(w, batch)
    eps = np.finfo(np.float64).eps
    worst, checked, skipped = 0.0, 0, 0
    per_tensor = {}

    def at(name, tensor, i, offset):
        """Loss at the perturbed weights, or None if a branch changed."""
        tensors = dict(w.tensors)
        t = tensor.copy()
        t.flat[i] += offset
        tensors[name] = t
        ww = NetworkWeights(w.kind, tensors)
        if objective.signature(ww, batch) != base_sig:
            return None
        return objective.value(ww, batch)

    def estimate(name, tensor, i, step):
        plus, minus = at(name, tensor, i, step), at(name, tensor, i, -step)
        if plus is not None and minus is not None:
            half_plus, half_minus = at(name, tensor, i, step / 2), at(name, tensor, i, -step / 2)
            coarse = (plus - minus) / (2 * step)
            if half_plus is None or half_minus is None:
                return coarse
            return (4 * (half_plus - half_minus) / step - coarse) / 3
        for sign, near in ((1.0, plus), (-1.0, minus)):
            if near is None:
                continue
            far = at(name, tensor, i, 2 * sign * step)
            if far is not None:
                return sign * (-3 * loss + 4 * near - far) / (2 * step)
        return None

    for name, tensor in w.tensors.items():
        idx = rng.choice(tensor.size, size=min(tensor.size, entries_per_tensor), replace=False)
        per_tensor[name] = 0
        for i in idx:
            for step in (h, h / 100):
                fd = estimate(name, tensor, i, step)
                if fd is not None:
                    break
            if fd is None:
                skipped += 1
                continue
            an = grads[name].flat[i]
            floor = 1e5 * eps * max(abs(loss), 1.0) / step
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
            checked += 1
            per_tensor[name] += 1
    return worst, checked, skipped, per_tensor
