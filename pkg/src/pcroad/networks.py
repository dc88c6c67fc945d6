"""PointNet-lite classifier and box networks, energy scoring and gating.

Both networks share one layout: a per-point MLP (3-32-64-128) with ReLU,
max-pooled into a global feature, optionally concatenated with a 32-wide
location feature (PVLE: 3-64-32 on the proposal's voxel-centre features).
Dense layers compute ``x @ W + b`` with ``W`` stored as (in, out).

The ``*_pass`` functions run batched forwards and keep the activations the
training code needs for backpropagation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import (CLASS_NAMES, NUM_CLASSES, NUM_HEADING_BINS, NUM_SIZE_TEMPLATES, SIZE_TEMPLATES, Box3D,
                    heading_bin_centers, wrap_angle)
from .proposals import Proposal, yaw_rotation

ENCODER_WIDTHS = (3, 32, 64, 128)
PVLE_WIDTHS = (3, 64, 32)
CLS_HIDDEN = 64
TNET_HIDDEN = 64
RNET_HIDDEN = 64
BOX_HIDDEN = 128
NH = NUM_HEADING_BINS
NS = NUM_SIZE_TEMPLATES
BOX_OUT = 3 + 2 * NH + 4 * NS
GLOBAL = ENCODER_WIDTHS[-1]
PVLE_OUT = PVLE_WIDTHS[-1]


class ConfigurationError(ValueError):
    pass


@dataclass
class NetworkWeights:
    """Named parameter tensors of one network (``kind`` is 'classifier' or 'box')."""

    kind: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def pvle_enabled(self) -> bool:
        return "pvle.w1" in self.tensors

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(self.kind, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.kind, {k: v.copy() for k, v in self.tensors.items()})

    def check(self) -> None:
        expected = weight_shapes(self.kind, self.pvle_enabled)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) ^ set(self.tensors))
            raise ConfigurationError(f"{self.kind} weights: unexpected or missing tensors {missing}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ConfigurationError(f"{name}: non-finite values")


def _dense_shapes(prefix, widths):
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        out[f"{prefix}.w{i}"] = (a, b)
        out[f"{prefix}.b{i}"] = (b,)
    return out


def weight_shapes(kind: str, use_pvle: bool = True) -> dict[str, tuple]:
    feat = GLOBAL + (PVLE_OUT if use_pvle else 0)
    shapes = _dense_shapes("enc", ENCODER_WIDTHS)
    if use_pvle:
        shapes.update(_dense_shapes("pvle", PVLE_WIDTHS))
    if kind == "classifier":
        shapes.update(_dense_shapes("head", (feat, CLS_HIDDEN, NUM_CLASSES)))
    elif kind == "box":
        shapes.update(_dense_shapes("tnet", (feat, TNET_HIDDEN, 3)))
        shapes.update(_dense_shapes("rnet", (feat, RNET_HIDDEN, 1)))
        shapes.update(_dense_shapes("box", (feat, BOX_HIDDEN, BOX_OUT)))
    else:
        raise ConfigurationError(f"unknown network kind {kind!r}")
    return shapes


def init_weights(kind: str, seed: int = 0, use_pvle: bool = True, dtype=np.float64) -> NetworkWeights:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in weight_shapes(kind, use_pvle).items():
        if len(shape) == 2:
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkWeights(kind, tensors)


def relu(x):
    return np.maximum(x, 0.0)


# --- forward passes -------------------------------------------------------

def encoder_pass(w: NetworkWeights, pts: np.ndarray):
    """Per-point MLP + max-pool. Returns (B, 128) global features and a cache."""
    b, m, _ = pts.shape
    x = pts.reshape(b * m, 3)
    a1 = x @ w["enc.w1"] + w["enc.b1"]
    h1 = relu(a1)
    a2 = h1 @ w["enc.w2"] + w["enc.b2"]
    h2 = relu(a2)
    a3 = h2 @ w["enc.w3"] + w["enc.b3"]
    h3 = relu(a3).reshape(b, m, GLOBAL)
    arg = h3.argmax(axis=1)  # first index on ties
    g = np.take_along_axis(h3, arg[:, None, :], axis=1)[:, 0]
    return g, {"x": x, "h1": h1, "h2": h2, "h3": h3, "arg": arg, "shape": (b, m)}


def pvle_pass(w: NetworkWeights, vox: np.ndarray):
    a1 = vox @ w["pvle.w1"] + w["pvle.b1"]
    h1 = relu(a1)
    a2 = h1 @ w["pvle.w2"] + w["pvle.b2"]
    v = relu(a2)
    return v, {"x": vox, "h1": h1, "v": v}


def head_pass(w: NetworkWeights, prefix: str, z: np.ndarray):
    hid = relu(z @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"])
    out = hid @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]
    return out, {"z": z, "hid": hid}


def _features(w, g, v):
    return np.concatenate([g, v], axis=1) if v is not None else g


def classifier_pass(w: NetworkWeights, pts: np.ndarray, vox: np.ndarray | None):
    g, enc = encoder_pass(w, pts)
    v, pv = pvle_pass(w, vox) if w.pvle_enabled else (None, None)
    logits, head = head_pass(w, "head", _features(w, g, v))
    return logits, {"enc": enc, "pvle": pv, "head": head}


def box_pass(w: NetworkWeights, pts: np.ndarray, vox: np.ndarray | None):
    """Returns (raw box head output (B, BOX_OUT), tnet delta (B, 3), rnet yaw (B,), cache)."""
    g1, enc1 = encoder_pass(w, pts)
    v, pv = pvle_pass(w, vox) if w.pvle_enabled else (None, None)
    z1 = _features(w, g1, v)
    tdelta, tnet = head_pass(w, "tnet", z1)
    ryaw, rnet = head_pass(w, "rnet", z1)
    g2, enc2 = encoder_pass(w, pts - tdelta[:, None, :])
    out, box = head_pass(w, "box", _features(w, g2, v))
    cache = {"enc1": enc1, "enc2": enc2, "pvle": pv, "tnet": tnet, "rnet": rnet, "box": box}
    return out, tdelta, ryaw[:, 0], cache


# --- public single-proposal API ------------------------------------------

def _as_batch(points, dtype):
    pts = np.asarray(points, dtype=dtype)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite network input")
    return (pts[None], True) if pts.ndim == 2 else (pts, False)


def pvle_forward(voxel_features, w: NetworkWeights) -> np.ndarray:
    vf = np.asarray(voxel_features, dtype=w.dtype)
    if vf.shape[-1] != PVLE_WIDTHS[0]:
        raise ConfigurationError(f"voxel features must have {PVLE_WIDTHS[0]} entries, got {vf.shape}")
    if not w.pvle_enabled:
        raise ConfigurationError("network has no location encoder")
    single = vf.ndim == 1
    v, _ = pvle_pass(w, vf.reshape(-1, 3))
    return v[0] if single else v


def _head_input(w, g, pvle_feat):
    if not w.pvle_enabled:
        return g
    if pvle_feat is None:
        raise ConfigurationError("network expects a location feature")
    v = np.asarray(pvle_feat, dtype=w.dtype).reshape(-1, PVLE_OUT)
    if len(v) == 1 and len(g) > 1:
        v = np.repeat(v, len(g), axis=0)
    return np.concatenate([g, v], axis=1)


def classifier_forward(canonical_points, pvle_feat, w: NetworkWeights) -> np.ndarray:
    """Class logits (car, pedestrian, cyclist) for one (M, 3) proposal or a (B, M, 3) batch."""
    pts, single = _as_batch(canonical_points, w.dtype)
    g, _ = encoder_pass(w, pts)
    logits, _ = head_pass(w, "head", _head_input(w, g, pvle_feat))
    return logits[0] if single else logits


@dataclass(frozen=True, eq=False)
class BoxPrediction:
    center_delta: np.ndarray        # (..., 3)
    tnet_delta: np.ndarray          # (..., 3)
    heading_logits: np.ndarray      # (..., NH)
    heading_residuals: np.ndarray   # (..., NH) rad
    size_logits: np.ndarray         # (..., NS)
    size_residuals: np.ndarray      # (..., NS, 3) fractions of the template
    rnet_yaw: np.ndarray | float    # (...,) rad

    @classmethod
    def from_raw(cls, out, tdelta, ryaw) -> "BoxPrediction":
        o = 3
        parts = [out[..., :3]]
        for width in (NH, NH, NS, NS * 3):
            parts.append(out[..., o:o + width])
            o += width
        sres = parts[4].reshape(parts[4].shape[:-1] + (NS, 3))
        return cls(parts[0], tdelta, parts[1], parts[2], parts[3], sres, ryaw)

    def __getitem__(self, i) -> "BoxPrediction":
        return BoxPrediction(self.center_delta[i], self.tnet_delta[i], self.heading_logits[i],
                             self.heading_residuals[i], self.size_logits[i],
                             self.size_residuals[i], np.asarray(self.rnet_yaw)[i])


def box_forward(canonical_points, pvle_feat, w: NetworkWeights) -> BoxPrediction:
    pts, single = _as_batch(canonical_points, w.dtype)
    g1, _ = encoder_pass(w, pts)
    z1 = _head_input(w, g1, pvle_feat)
    tdelta, _ = head_pass(w, "tnet", z1)
    ryaw, _ = head_pass(w, "rnet", z1)
    g2, _ = encoder_pass(w, pts - tdelta[:, None, :])
    out, _ = head_pass(w, "box", _head_input(w, g2, pvle_feat))
    pred = BoxPrediction.from_raw(out, tdelta, ryaw[:, 0])
    return pred[0] if single else pred


# --- energy and gating ----------------------------------------------------

def energy_score(logits, T: float = 1.0):
    """-T log sum exp(f / T) over the last axis (max-shifted)."""
    f = np.asarray(logits, dtype=np.float64)
    if f.shape[-1] == 0:
        raise ValueError("energy of an empty logit vector")
    if T <= 0:
        raise ValueError("temperature must be positive")
    s = f / T
    mx = s.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(s - mx).sum(axis=-1))
    e = -T * lse
    return float(e) if np.ndim(e) == 0 else e


def box_energy_logits(p: BoxPrediction) -> np.ndarray:
    """Heading logits followed by size logits."""
    return np.concatenate([p.heading_logits, p.size_logits], axis=-1)


@dataclass(frozen=True)
class EnergyConfig:
    T: float = 1.0
    gamma_c: float = 0.0
    gamma_b: float = 0.0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("temperature must be positive")


def id_passthrough(E_c: float, E_b: float | None, cfg: EnergyConfig) -> str:
    """'in' iff E_c < gamma_c (and E_b < gamma_b when a box energy is given)."""
    if E_c >= cfg.gamma_c:
        return "out"
    if E_b is not None and E_b >= cfg.gamma_b:
        return "out"
    return "in"


def calibrate_threshold(id_energies, rate: float = 0.95) -> float:
    """Smallest threshold with at least ``rate * n`` energies strictly below it."""
    e = np.sort(np.asarray(id_energies, dtype=np.float64).ravel())
    if e.size == 0:
        raise ValueError("no energies to calibrate on")
    if not 0 < rate < 1:
        raise ValueError("rate must lie in (0, 1)")
    k = math.ceil(rate * e.size - 1e-12)
    if k >= e.size:
        return float(np.nextafter(e[-1], np.inf))
    gamma = e[k]
    if np.count_nonzero(e < gamma) < k:  # ties at the order statistic
        gamma = np.nextafter(e[k], np.inf)
    return float(gamma)


# --- decoding ---------------------------------------------------------------

def softmax(logits, T: float = 1.0):
    s = np.asarray(logits, dtype=np.float64) / T
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def decode_canonical(p: BoxPrediction) -> tuple[np.ndarray, np.ndarray, float]:
    """Centre, size and yaw in the proposal's canonical frame."""
    h = int(np.argmax(p.heading_logits))
    s = int(np.argmax(p.size_logits))
    yaw = heading_bin_centers(NH)[h] + p.heading_residuals[h] + float(p.rnet_yaw)
    size = SIZE_TEMPLATES[s] * (1.0 + p.size_residuals[s])
    center = np.asarray(p.tnet_delta, dtype=np.float64) + p.center_delta
    return center, size, float(yaw)


def to_world(center, yaw, proposal: Proposal) -> tuple[np.ndarray, float]:
    phi = proposal.azimuth
    return yaw_rotation(phi) @ np.asarray(center) + proposal.mean, float(wrap_angle(yaw + phi))


def decode_box(p: BoxPrediction, proposal: Proposal, min_size: float = 0.1) -> tuple[Box3D, bool]:
    """World-frame box from a prediction. Returns (box, degenerate) where
    ``degenerate`` flags a size component clamped to ``min_size``."""
    center, size, yaw = decode_canonical(p)
    degenerate = bool(np.any(size <= 0))
    size = np.where(size <= 0, min_size, size)
    wc, wyaw = to_world(center, yaw, proposal)
    return Box3D(wc, size, wyaw), degenerate


@dataclass(frozen=True, eq=False)
class Detection:
    box: Box3D
    class_probs: np.ndarray
    energy_cls: float
    energy_box: float
    cluster_id: int = 0
    degenerate: bool = False

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]

    @property
    def score(self) -> float:
        return -self.energy_cls


# --- critical points ---------------------------------------------------------

def critical_point_set(canonical_points, w: NetworkWeights, which: str = "classifier",
                       voxel_features=None) -> set[int]:
    """Indices of points realising the max-pooled global feature.

    For the box network the pooled pass is the one feeding the box head, i.e.
    after T-Net re-centring; ``voxel_features`` feed its location encoder
    (zeros if omitted).
    """
    pts, _ = _as_batch(canonical_points, w.dtype)
    if which == "classifier":
        _, enc = encoder_pass(w, pts)
    elif which == "box":
        vox = None
        if w.pvle_enabled:
            vf = np.zeros(3) if voxel_features is None else voxel_features
            vox = np.asarray(vf, dtype=w.dtype).reshape(1, 3)
        _, _, _, cache = box_pass(w, pts, vox)
        enc = cache["enc2"]
    else:
        raise ValueError(f"unknown network {which!r}")
    return set(int(i) for i in np.unique(enc["arg"][0]))


def critical_set_overlap(a: set[int], b: set[int]) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0
