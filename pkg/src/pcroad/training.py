"""Losses, reverse-mode gradients and Adam training for both networks.

All arithmetic here runs in float64. Gradients are written by hand against
the forward caches produced in :mod:`pcroad.networks`.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import (CORNER_SIGNS, FLIP_PERM, NUM_HEADING_BINS, SIZE_TEMPLATES, Box3D, angle_to_bin,
                    box_corners, box_corners_batch, heading_bin_centers, wrap_angle)
from .networks import (GLOBAL, NH, NS, BoxPrediction, NetworkWeights, box_pass, classifier_pass,
                       init_weights)
from .proposals import Proposal, yaw_rotation

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, message: str = ""):
        super().__init__(message or f"non-finite value in {name}")
        self.name = name


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 200
    lam: float = 0.1
    gamma_corner: float = 10.0
    m_id: float = -23.0
    m_ood: float = -5.0
    T: float = 1.0
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.m_id >= self.m_ood:
            log.warning("m_id (%s) >= m_ood (%s): energy margins overlap", self.m_id, self.m_ood)


@dataclass(frozen=True, eq=False)
class BoxTargets:
    heading_bin: int
    heading_residual: float
    size_bin: int
    size_residual: np.ndarray  # (3,)
    center: np.ndarray         # (3,) canonical frame
    corners_gt: np.ndarray     # (8, 3)
    corners_gt_flipped: np.ndarray


# --- elementwise pieces ------------------------------------------------------

def huber(x):
    a = np.abs(x)
    return np.where(a < 1.0, 0.5 * x * x, a - 0.5)


def huber_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _log_softmax(f, T=1.0):
    s = f / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _energy_and_grad(f, T):
    """Energy per row and dE/df = -softmax(f / T)."""
    ls = _log_softmax(f, T)
    s = f / T
    mx = s.max(axis=-1)
    e = -T * (mx + np.log(np.exp(s - mx[:, None]).sum(axis=-1)))
    return e, -np.exp(ls)


def _cross_entropy(f, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(f)
    ls = _log_softmax(f)
    loss = -ls[np.arange(n), labels].mean()
    g = np.exp(ls)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def energy_hinge(id_logits, ood_logits, cfg: TrainConfig):
    """Squared-hinge energy loss and gradients for ID and OOD logits."""
    e_id, de_id = _energy_and_grad(id_logits, cfg.T)
    e_ood, de_ood = _energy_and_grad(ood_logits, cfg.T)
    h_id = np.maximum(e_id - cfg.m_id, 0.0)
    h_ood = np.maximum(cfg.m_ood - e_ood, 0.0)
    loss = (h_id ** 2).mean() + (h_ood ** 2).mean()
    g_id = (2.0 * h_id / len(e_id))[:, None] * de_id
    g_ood = (-2.0 * h_ood / len(e_ood))[:, None] * de_ood
    return loss, g_id, g_ood


# --- classifier objective ----------------------------------------------------

def classifier_loss_terms(id_logits, labels, ood_logits, cfg: TrainConfig):
    ce, g_ce = _cross_entropy(np.asarray(id_logits, dtype=np.float64), np.asarray(labels))
    en, g_id, g_ood = energy_hinge(np.asarray(id_logits, dtype=np.float64),
                                   np.asarray(ood_logits, dtype=np.float64), cfg)
    loss = ce + cfg.lam * en
    return loss, g_ce + cfg.lam * g_id, cfg.lam * g_ood, {"ce": ce, "energy": en}


def classifier_loss(id_logits, labels, ood_logits, cfg: TrainConfig) -> float:
    """Cross-entropy over ID samples plus ``lam`` times the energy hinge loss."""
    return float(classifier_loss_terms(id_logits, labels, ood_logits, cfg)[0])


# --- box objective -------------------------------------------------------------

def corner_loss(pred_corners, corners_gt, corners_gt_flipped) -> float:
    """Sum of corner distances to the ground truth, minimised over the flipped box.

    Arrays are (8, 3) or batched (B, 8, 3); the batch mean is returned.
    """
    p = np.asarray(pred_corners, dtype=np.float64)
    d1 = np.linalg.norm(p - corners_gt, axis=-1).sum(axis=-1)
    d2 = np.linalg.norm(p - corners_gt_flipped, axis=-1).sum(axis=-1)
    return float(np.mean(np.minimum(d1, d2)))


def _corner_terms(center, size, yaw, gt, gt_flip):
    """Mean corner loss over the batch and gradients w.r.t. centre, size, yaw."""
    n = len(center)
    p = box_corners_batch(center, size, yaw)
    diff1, diff2 = p - gt, p - gt_flip
    n1, n2 = np.linalg.norm(diff1, axis=-1), np.linalg.norm(diff2, axis=-1)
    d1, d2 = n1.sum(axis=1), n2.sum(axis=1)
    use_flip = d2 < d1
    diff = np.where(use_flip[:, None, None], diff2, diff1)
    norms = np.where(use_flip[:, None], n2, n1)
    loss = np.minimum(d1, d2).mean()
    dp = np.divide(diff, norms[..., None], out=np.zeros_like(diff), where=norms[..., None] > 0) / n

    local = CORNER_SIGNS[None] * (size[:, None, :] / 2.0)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    dl_x = c * dp[..., 0] + s * dp[..., 1]
    dl_y = -s * dp[..., 0] + c * dp[..., 1]
    dl = np.stack([dl_x, dl_y, dp[..., 2]], axis=-1)
    d_size = (dl * CORNER_SIGNS[None] / 2.0).sum(axis=1)
    d_yaw = (dp[..., 0] * (-s * local[..., 0] - c * local[..., 1])
             + dp[..., 1] * (c * local[..., 0] - s * local[..., 1])).sum(axis=1)
    d_center = dp.sum(axis=1)
    return loss, d_center, d_size, d_yaw, use_flip


@dataclass
class TargetArrays:
    """Batched :class:`BoxTargets`."""

    heading_bin: np.ndarray
    heading_residual: np.ndarray
    size_bin: np.ndarray
    size_residual: np.ndarray
    center: np.ndarray
    corners_gt: np.ndarray
    corners_gt_flipped: np.ndarray

    @classmethod
    def stack(cls, targets: list[BoxTargets]) -> "TargetArrays":
        return cls(
            np.array([t.heading_bin for t in targets], dtype=np.int64),
            np.array([t.heading_residual for t in targets]),
            np.array([t.size_bin for t in targets], dtype=np.int64),
            np.array([t.size_residual for t in targets]).reshape(-1, 3),
            np.array([t.center for t in targets]).reshape(-1, 3),
            np.array([t.corners_gt for t in targets]).reshape(-1, 8, 3),
            np.array([t.corners_gt_flipped for t in targets]).reshape(-1, 8, 3),
        )

    def take(self, idx) -> "TargetArrays":
        return TargetArrays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def box_loss_terms(out, tdelta, ryaw, targets: TargetArrays, ood_out, cfg: TrainConfig):
    """Box loss on ID predictions plus the box energy loss on ID/OOD logits.

    ``out``/``ood_out`` are raw box-head outputs. Returns the loss, gradients
    for (out, tdelta, ryaw, ood_out) and a dict of individual terms.
    """
    n = len(out)
    rows = np.arange(n)
    pred = BoxPrediction.from_raw(out, tdelta, ryaw)
    d_out = np.zeros_like(out)
    d_t = np.zeros_like(tdelta)
    d_ry = np.zeros_like(ryaw)

    r1 = tdelta - targets.center
    c1 = huber(r1).sum(axis=1).mean()
    d_t += huber_grad(r1) / n

    center = tdelta + pred.center_delta
    r2 = center - targets.center
    c2 = huber(r2).sum(axis=1).mean()
    g2 = huber_grad(r2) / n
    d_t += g2
    d_out[:, 0:3] += g2

    h_cls, g_h = _cross_entropy(pred.heading_logits, targets.heading_bin)
    d_out[:, 3:3 + NH] += g_h

    hb = targets.heading_bin
    rh = pred.heading_residuals[rows, hb] + ryaw - targets.heading_residual
    h_reg = huber(rh).mean()
    d_out[rows, 3 + NH + hb] += huber_grad(rh) / n
    d_ry += huber_grad(rh) / n

    s_cls, g_s = _cross_entropy(pred.size_logits, targets.size_bin)
    off_s = 3 + 2 * NH
    d_out[:, off_s:off_s + NS] += g_s

    sb = targets.size_bin
    sres = pred.size_residuals[rows, sb]
    rs = sres - targets.size_residual
    s_reg = huber(rs).sum(axis=1).mean()
    off_r = off_s + NS
    d_sres = huber_grad(rs) / n

    size = SIZE_TEMPLATES[sb] * (1.0 + sres)
    yaw = heading_bin_centers(NH)[hb] + pred.heading_residuals[rows, hb] + ryaw
    corner, dc, dsize, dyaw, _ = _corner_terms(center, size, yaw, targets.corners_gt,
                                               targets.corners_gt_flipped)
    gc = cfg.gamma_corner
    d_t += gc * dc
    d_out[:, 0:3] += gc * dc
    d_sres += gc * dsize * SIZE_TEMPLATES[sb]
    d_out[rows, 3 + NH + hb] += gc * dyaw
    d_ry += gc * dyaw
    for k in range(3):
        d_out[rows, off_r + sb * 3 + k] += d_sres[:, k]

    id_e_logits = np.concatenate([pred.heading_logits, pred.size_logits], axis=1)
    ood_pred = BoxPrediction.from_raw(ood_out, np.zeros((len(ood_out), 3)), np.zeros(len(ood_out)))
    ood_e_logits = np.concatenate([ood_pred.heading_logits, ood_pred.size_logits], axis=1)
    energy, ge_id, ge_ood = energy_hinge(id_e_logits, ood_e_logits, cfg)
    d_out[:, 3:3 + NH] += cfg.lam * ge_id[:, :NH]
    d_out[:, off_s:off_s + NS] += cfg.lam * ge_id[:, NH:]
    d_ood = np.zeros_like(ood_out)
    d_ood[:, 3:3 + NH] = cfg.lam * ge_ood[:, :NH]
    d_ood[:, off_s:off_s + NS] = cfg.lam * ge_ood[:, NH:]

    terms = {"c1": c1, "c2": c2, "h_cls": h_cls, "h_reg": h_reg, "s_cls": s_cls,
             "s_reg": s_reg, "corner": corner, "energy": energy}
    loss = c1 + c2 + h_cls + h_reg + s_cls + s_reg + gc * corner + cfg.lam * energy
    return loss, (d_out, d_t, d_ry, d_ood), terms


def box_loss(pred: BoxPrediction, targets, ood_preds: BoxPrediction, cfg: TrainConfig) -> float:
    """Box multi-task loss for (batched) predictions against encoded targets."""
    if isinstance(targets, BoxTargets):
        targets = TargetArrays.stack([targets])
    out = _pack(pred)
    ood = _pack(ood_preds)
    tdelta = np.asarray(pred.tnet_delta, dtype=np.float64).reshape(-1, 3)
    ryaw = np.asarray(pred.rnet_yaw, dtype=np.float64).reshape(-1)
    return float(box_loss_terms(out, tdelta, ryaw, targets, ood, cfg)[0])


def box_loss_breakdown(pred: BoxPrediction, targets, ood_preds: BoxPrediction, cfg: TrainConfig) -> dict:
    if isinstance(targets, BoxTargets):
        targets = TargetArrays.stack([targets])
    tdelta = np.asarray(pred.tnet_delta, dtype=np.float64).reshape(-1, 3)
    ryaw = np.asarray(pred.rnet_yaw, dtype=np.float64).reshape(-1)
    return box_loss_terms(_pack(pred), tdelta, ryaw, targets, _pack(ood_preds), cfg)[2]


def _pack(p: BoxPrediction) -> np.ndarray:
    parts = [p.center_delta, p.heading_logits, p.heading_residuals, p.size_logits]
    parts = [np.asarray(a, dtype=np.float64) for a in parts]
    lead = parts[0].shape[:-1]
    sres = np.asarray(p.size_residuals, dtype=np.float64).reshape(lead + (NS * 3,))
    return np.concatenate(parts + [sres], axis=-1).reshape(-1, 3 + 2 * NH + 4 * NS)


# --- target encoding ---------------------------------------------------------------

def encode_box_targets(gt_box: Box3D, proposal: Proposal, size_bin: int,
                       nh: int = NUM_HEADING_BINS) -> BoxTargets:
    """Express a world-frame box in the proposal's canonical frame as bins + residuals.

    The stored corners are rebuilt from the encoded values so that an exact
    prediction reproduces them bit for bit.
    """
    phi = proposal.azimuth
    center = yaw_rotation(-phi) @ (gt_box.center - proposal.mean)
    yaw = float(wrap_angle(gt_box.yaw - phi))
    hb, hres = angle_to_bin(yaw, nh)
    template = SIZE_TEMPLATES[size_bin]
    sres = gt_box.size / template - 1.0
    enc_yaw = heading_bin_centers(nh)[hb] + hres + 0.0
    corners = box_corners_batch(center[None], (template * (1.0 + sres))[None], np.array([enc_yaw]))[0]
    return BoxTargets(hb, hres, int(size_bin), sres, center, corners, corners[FLIP_PERM])


def prediction_from_targets(t: BoxTargets, logit_scale: float = 10.0) -> BoxPrediction:
    """A prediction that decodes exactly to ``t`` (T-Net carries the whole centre)."""
    hl = np.zeros(NH)
    hl[t.heading_bin] = logit_scale
    hr = np.zeros(NH)
    hr[t.heading_bin] = t.heading_residual
    sl = np.zeros(NS)
    sl[t.size_bin] = logit_scale
    sr = np.zeros((NS, 3))
    sr[t.size_bin] = t.size_residual
    return BoxPrediction(np.zeros(3), np.array(t.center, dtype=np.float64), hl, hr, sl, sr, 0.0)


# --- backpropagation -----------------------------------------------------------------

def _dense_back(w, grads, name, i, x, dy):
    grads[f"{name}.w{i}"] += x.T @ dy
    grads[f"{name}.b{i}"] += dy.sum(axis=0)
    return dy @ w[f"{name}.w{i}"].T


def _encoder_back(w, grads, cache, dg, need_input=False):
    b, m = cache["shape"]
    h3 = cache["h3"]
    dh3 = np.zeros_like(h3)
    np.put_along_axis(dh3, cache["arg"][:, None, :], dg[:, None, :], axis=1)
    da3 = (dh3 * (h3 > 0)).reshape(b * m, GLOBAL)
    dh2 = _dense_back(w, grads, "enc", 3, cache["h2"], da3)
    dh1 = _dense_back(w, grads, "enc", 2, cache["h1"], dh2 * (cache["h2"] > 0))
    da1 = dh1 * (cache["h1"] > 0)
    if need_input:
        return _dense_back(w, grads, "enc", 1, cache["x"], da1).reshape(b, m, 3)
    grads["enc.w1"] += cache["x"].T @ da1
    grads["enc.b1"] += da1.sum(axis=0)
    return None


def _head_back(w, grads, prefix, cache, dout):
    hid = cache["hid"]
    dhid = _dense_back(w, grads, prefix, 2, hid, dout)
    return _dense_back(w, grads, prefix, 1, cache["z"], dhid * (hid > 0))


def _pvle_back(w, grads, cache, dv):
    da2 = dv * (cache["v"] > 0)
    dh1 = _dense_back(w, grads, "pvle", 2, cache["h1"], da2)
    da1 = dh1 * (cache["h1"] > 0)
    grads["pvle.w1"] += cache["x"].T @ da1
    grads["pvle.b1"] += da1.sum(axis=0)


def _zeros_like(w: NetworkWeights):
    return {k: np.zeros_like(v) for k, v in w.tensors.items()}


def _signature(*caches, extra=()):
    """Digest of every ReLU pattern, max-pool argmax and loss branch."""
    h = hashlib.sha1()

    def visit(obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                if k in ("h1", "h2", "h3", "hid", "v"):
                    h.update(np.packbits(obj[k] > 0).tobytes())
                elif k == "arg":
                    h.update(obj[k].tobytes())
                elif isinstance(obj[k], dict):
                    visit(obj[k])

    for c in caches:
        visit(c)
    for e in extra:
        h.update(np.asarray(e).tobytes())
    return h.hexdigest()


@dataclass
class Batch:
    """ID samples (with labels / box targets) followed by OOD samples."""

    id_points: np.ndarray
    id_vox: np.ndarray
    ood_points: np.ndarray
    ood_vox: np.ndarray
    labels: np.ndarray | None = None
    targets: TargetArrays | None = None


class ClassifierObjective:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def _forward(self, w, batch: Batch):
        pts = np.concatenate([batch.id_points, batch.ood_points])
        vox = np.concatenate([batch.id_vox, batch.ood_vox])
        logits, cache = classifier_pass(w, pts, vox if w.pvle_enabled else None)
        n = len(batch.id_points)
        loss, g_id, g_ood, terms = classifier_loss_terms(logits[:n], batch.labels, logits[n:], self.cfg)
        return loss, np.concatenate([g_id, g_ood]), cache, logits, n

    def value(self, w, batch) -> float:
        return float(self._forward(w, batch)[0])

    def value_and_grad(self, w: NetworkWeights, batch: Batch):
        loss, dlogits, cache, _, _ = self._forward(w, batch)
        grads = _zeros_like(w)
        dz = _head_back(w, grads, "head", cache["head"], dlogits)
        _encoder_back(w, grads, cache["enc"], dz[:, :GLOBAL])
        if w.pvle_enabled:
            _pvle_back(w, grads, cache["pvle"], dz[:, GLOBAL:])
        return float(loss), grads

    def signature(self, w, batch) -> str:
        loss, _, cache, logits, n = self._forward(w, batch)
        e, _ = _energy_and_grad(logits, self.cfg.T)
        return _signature(cache, extra=[e[:n] > self.cfg.m_id, e[n:] < self.cfg.m_ood])


class BoxObjective:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def _forward(self, w, batch: Batch):
        pts = np.concatenate([batch.id_points, batch.ood_points])
        vox = np.concatenate([batch.id_vox, batch.ood_vox])
        out, tdelta, ryaw, cache = box_pass(w, pts, vox if w.pvle_enabled else None)
        n = len(batch.id_points)
        loss, grads_out, terms = box_loss_terms(out[:n], tdelta[:n], ryaw[:n], batch.targets,
                                                out[n:], self.cfg)
        return loss, grads_out, cache, (out, tdelta, ryaw), n

    def value(self, w, batch) -> float:
        return float(self._forward(w, batch)[0])

    def value_and_grad(self, w: NetworkWeights, batch: Batch):
        loss, (d_out, d_t, d_ry, d_ood), cache, (out, tdelta, ryaw), n = self._forward(w, batch)
        d_out = np.concatenate([d_out, d_ood])
        d_t = np.concatenate([d_t, np.zeros((len(d_ood), 3))])
        d_ry = np.concatenate([d_ry, np.zeros(len(d_ood))])
        grads = _zeros_like(w)
        dz2 = _head_back(w, grads, "box", cache["box"], d_out)
        dx2 = _encoder_back(w, grads, cache["enc2"], dz2[:, :GLOBAL], need_input=True)
        d_t = d_t - dx2.sum(axis=1)
        dz1 = _head_back(w, grads, "tnet", cache["tnet"], d_t)
        dz1 += _head_back(w, grads, "rnet", cache["rnet"], d_ry[:, None])
        _encoder_back(w, grads, cache["enc1"], dz1[:, :GLOBAL])
        if w.pvle_enabled:
            _pvle_back(w, grads, cache["pvle"], dz2[:, GLOBAL:] + dz1[:, GLOBAL:])
        return float(loss), grads

    def signature(self, w, batch) -> str:
        _, _, cache, (out, tdelta, ryaw), n = self._forward(w, batch)
        t = batch.targets
        rows = np.arange(n)
        pred = BoxPrediction.from_raw(out[:n], tdelta[:n], ryaw[:n])
        center = tdelta[:n] + pred.center_delta
        sres = pred.size_residuals[rows, t.size_bin]
        size = SIZE_TEMPLATES[t.size_bin] * (1.0 + sres)
        yaw = heading_bin_centers(NH)[t.heading_bin] + pred.heading_residuals[rows, t.heading_bin] + ryaw[:n]
        *_, use_flip = _corner_terms(center, size, yaw, t.corners_gt, t.corners_gt_flipped)
        e_logits = np.concatenate([out[:, 3:3 + NH], out[:, 3 + 2 * NH:3 + 2 * NH + NS]], axis=1)
        e, _ = _energy_and_grad(e_logits, self.cfg.T)
        branches = [np.abs(tdelta[:n] - t.center) < 1, np.abs(center - t.center) < 1,
                    np.abs(pred.heading_residuals[rows, t.heading_bin] + ryaw[:n] - t.heading_residual) < 1,
                    np.abs(sres - t.size_residual) < 1, use_flip,
                    e[:n] > self.cfg.m_id, e[n:] < self.cfg.m_ood]
        return _signature(cache, extra=branches)


def grad(loss_fn, weights: NetworkWeights, batch) -> dict[str, np.ndarray]:
    """Exact gradients of ``loss_fn`` (a Classifier/BoxObjective) w.r.t. every tensor."""
    loss, grads = loss_fn.value_and_grad(weights, batch)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        for name, t in weights.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NonFiniteError(name, f"loss is {loss}: weight tensor {name} is non-finite")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(name, f"loss is {loss}: gradient of {name} is non-finite")
        raise NonFiniteError("loss", f"loss is {loss}")
    return grads


# --- optimiser -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(weights: NetworkWeights, grads: dict, state: AdamState, cfg: TrainConfig,
              t: int | None = None, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new weights, state)."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    new = {}
    b1, b2 = cfg.beta1, cfg.beta2
    for name, w in weights.tensors.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = w - cfg.lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return NetworkWeights(weights.kind, new), state


# --- training loops ------------------------------------------------------------------

@dataclass
class ProposalSet:
    """Stacked network inputs: ID rows first are not required; ``labels`` is -1 for OOD."""

    points: np.ndarray   # (N, M, 3) canonical
    vox: np.ndarray      # (N, 3)
    labels: np.ndarray   # (N,)
    targets: TargetArrays | None = None  # aligned with the ID rows (labels >= 0)
    r_m: np.ndarray | None = None

    @property
    def id_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def ood_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)

    def __len__(self):
        return len(self.labels)


def _batches(ids, oods, batch_size, rng):
    half = max(1, batch_size // 2)
    ids = rng.permutation(ids)
    oods = rng.permutation(oods)
    steps = math.ceil(len(ids) / half)
    for s in range(steps):
        bi = ids[s * half:(s + 1) * half]
        bo = np.take(oods, np.arange(s * half, s * half + half), mode="wrap")
        yield bi, bo


def _make_batch(data: ProposalSet, bi, bo, id_pos=None):
    targets = None
    if data.targets is not None and id_pos is not None:
        targets = data.targets.take(id_pos[bi])
    return Batch(data.points[bi], data.vox[bi], data.points[bo], data.vox[bo],
                 data.labels[bi], targets)


def train_network(kind: str, data: ProposalSet, cfg: TrainConfig, use_pvle: bool = True,
                  epochs: int | None = None, callback=None,
                  rng: np.random.Generator | None = None) -> tuple[NetworkWeights, list[float]]:
    """Train the classifier or box network; returns weights and per-epoch mean loss.

    Batches are shuffled with ``rng`` (default: seeded from ``cfg.seed``).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if len(data.id_index) == 0 or len(data.ood_index) == 0:
        raise ValueError("training needs both ID and OOD samples")
    w = init_weights(kind, seed=cfg.seed + (0 if kind == "classifier" else 1), use_pvle=use_pvle)
    objective = ClassifierObjective(cfg) if kind == "classifier" else BoxObjective(cfg)
    ids, oods = data.id_index, data.ood_index
    id_pos = np.full(len(data), -1)
    id_pos[ids] = np.arange(len(ids))
    state = AdamState()
    history = []
    for epoch in range(epochs if epochs is not None else cfg.epochs):
        losses = []
        for bi, bo in _batches(ids, oods, cfg.batch_size, rng):
            batch = _make_batch(data, bi, bo, id_pos)
            loss, g = objective.value_and_grad(w, batch)
            if not math.isfinite(loss):
                grad(objective, w, batch)  # raises with the offending tensor
            w, state = adam_step(w, g, state, cfg)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.4f", kind, epoch + 1, history[-1])
        if callback is not None:
            callback(epoch, history[-1], w)
    return w, history


def predict_logits(w: NetworkWeights, points, vox, batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(points), batch_size):
        logits, _ = classifier_pass(w, points[s:s + batch_size],
                                    vox[s:s + batch_size] if w.pvle_enabled else None)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, 3))


def predict_boxes(w: NetworkWeights, points, vox, batch_size: int = 512) -> BoxPrediction:
    outs, ts, rs = [], [], []
    for s in range(0, len(points), batch_size):
        out, t, r, _ = box_pass(w, points[s:s + batch_size],
                                vox[s:s + batch_size] if w.pvle_enabled else None)
        outs.append(out)
        ts.append(t)
        rs.append(r)
    return BoxPrediction.from_raw(np.concatenate(outs), np.concatenate(ts), np.concatenate(rs))
