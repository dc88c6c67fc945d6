"""Metrics: ground segmentation scores, rotated 3D IoU, AP, OOD separability, latency."""
from __future__ import annotations

import csv
import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .boxes import CLASS_NAMES, Box3D
from .ground import GroundMask
from .networks import calibrate_threshold

# --- ground segmentation -------------------------------------------------------


@dataclass(frozen=True)
class SegScore:
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _ratio(a, b):
        return a / b if b else 0.0

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def accuracy(self) -> float:
        return self._ratio(self.tp + self.tn, self.tp + self.fp + self.tn + self.fn)

    @property
    def iou(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp + self.fn)

    def __add__(self, other: "SegScore") -> "SegScore":
        return SegScore(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "precision": self.precision, "recall": self.recall,
                "accuracy": self.accuracy, "iou": self.iou}


def seg_metrics(pred: GroundMask, gt, index: np.ndarray | None = None) -> SegScore:
    """Confusion counts of a ground mask over valid cells.

    ``gt`` is either an H x W boolean image or, when ``index`` (the cloud's
    cell-to-point index) is given, a per-point boolean array.
    """
    valid = np.asarray(pred.valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid points to score")
    gt = np.asarray(gt, dtype=bool)
    if index is not None:
        cell_gt = np.zeros(valid.shape, dtype=bool)
        cell_gt[valid] = gt[np.asarray(index)[valid]]
        gt = cell_gt
    if gt.shape != valid.shape:
        raise ValueError(f"ground truth shape {gt.shape} does not match mask {valid.shape}")
    p = np.asarray(pred.mask, dtype=bool)[valid]
    g = gt[valid]
    return SegScore(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & ~g)), int(np.sum(~p & g)))


# --- rotated IoU -----------------------------------------------------------------

def bev_polygon(box: Box3D) -> np.ndarray:
    """Ground-plane footprint as a counter-clockwise (4, 2) polygon."""
    return box.corners()[[3, 2, 1, 0], :2]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0
            if cur_in != prev_in:
                # Edge prev->cur crosses the clip line a->b.
                d1, d2 = _cross(a, b, prev), _cross(a, b, cur)
                t = d1 / (d1 - d2)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-rotated boxes (BEV polygon overlap x height overlap)."""
    if np.any(a.size <= 0) or np.any(b.size <= 0):
        raise ValueError("boxes must have positive size")
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    # Cheap reject on circumscribed circles.
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(*(a.center[:2] - b.center[:2])) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(bev_polygon(a), bev_polygon(b))) * dz
    union = float(np.prod(a.size) + np.prod(b.size)) - inter
    return float(min(1.0, max(0.0, inter / union)))


# --- average precision ---------------------------------------------------------------

DEFAULT_IOU = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


@dataclass(frozen=True)
class GTBox:
    label: int
    box: Box3D
    frame: int = 0
    ignore: bool = False


@dataclass(frozen=True)
class ScoredBox:
    label: int
    box: Box3D
    score: float
    frame: int = 0


@dataclass
class APResult:
    ap: dict[str, float]
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    tp: dict[str, int] = field(default_factory=dict)
    fp: dict[str, int] = field(default_factory=dict)
    n_gt: dict[str, int] = field(default_factory=dict)
    mode: str = "40pt"

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else float("nan")


def recall_points(mode: str) -> np.ndarray:
    if mode == "11pt":
        return np.linspace(0.0, 1.0, 11)
    if mode == "40pt":
        return np.arange(1, 41) / 40.0
    raise ValueError(f"unknown AP mode {mode!r}")


def interpolated_ap(tp_flags: np.ndarray, n_gt: int, mode: str = "40pt"):
    """AP from TP/FP flags in descending-score order. Returns (ap, recall samples, precision samples).

    The precision-recall curve starts at (recall 0, precision 1); a detector
    without true positives scores 0.
    """
    r_pts = recall_points(mode)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0 or not tp_flags.any():
        return 0.0, r_pts, np.zeros_like(r_pts)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    # Monotone envelope: best precision at any recall >= r.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, r_pts, side="left")
    p_at = np.where(idx < len(recall), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(p_at.mean()), r_pts, p_at


def match_detections(dets: Sequence, gts: Sequence, iou_th: float):
    """Greedy matching in descending score; returns per-detection 'tp'/'fp'/'ignore'."""
    order = sorted(range(len(dets)), key=lambda i: -float(dets[i].score))
    used = [False] * len(gts)
    by_frame: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(getattr(g, "frame", 0), []).append(j)
    result = [""] * len(dets)
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j in by_frame.get(getattr(d, "frame", 0), []):
            if used[j]:
                continue
            v = iou3d(d.box, gts[j].box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_th:
            used[best_j] = True
            result[i] = "ignore" if getattr(gts[best_j], "ignore", False) else "tp"
        else:
            result[i] = "fp"
    return order, result


def average_precision(dets: Sequence, gts: Sequence, iou_th=None, mode: str = "40pt",
                      classes: Sequence[str] = CLASS_NAMES) -> APResult:
    """Per-class interpolated AP with greedy one-to-one matching.

    ``dets`` need ``label``, ``box``, ``score`` (and optionally ``frame``);
    ``gts`` need ``label``, ``box`` (optionally ``frame``, ``ignore``).
    Classes without non-ignored ground truth are left out of the result.
    """
    if iou_th is None:
        iou_th = DEFAULT_IOU
    res = APResult({}, mode=mode)
    for k, name in enumerate(classes):
        th = iou_th[name] if isinstance(iou_th, dict) else float(iou_th)
        cls_gts = [g for g in gts if g.label == k]
        n_gt = sum(not getattr(g, "ignore", False) for g in cls_gts)
        if n_gt == 0:
            continue
        cls_dets = [d for d in dets if d.label == k]
        order, status = match_detections(cls_dets, cls_gts, th)
        flags = np.array([status[i] == "tp" for i in order if status[i] != "ignore"], dtype=bool)
        ap, r_pts, p_at = interpolated_ap(flags, n_gt, mode)
        res.ap[name] = ap
        res.curves[name] = (r_pts, p_at)
        res.tp[name] = int(flags.sum())
        res.fp[name] = int((~flags).sum())
        res.n_gt[name] = n_gt
    return res


def write_ap_report(path, results: dict[str, APResult]) -> None:
    """Machine-readable CSV with one row per (difficulty, class)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["difficulty", "class", "mode", "ap", "tp", "fp", "n_gt"])
        for diff, r in results.items():
            for name, ap in r.ap.items():
                wr.writerow([diff, name, r.mode, f"{ap:.6f}", r.tp[name], r.fp[name], r.n_gt[name]])
            wr.writerow([diff, "mAP", r.mode, f"{r.mAP:.6f}", "", "", ""])


# --- OOD separability ----------------------------------------------------------------


@dataclass
class Separability:
    auroc: float
    fpr95: float
    threshold: float
    bin_edges: np.ndarray
    id_hist: np.ndarray
    ood_hist: np.ndarray


def auroc(id_energies, ood_energies) -> float:
    """P(E_id < E_ood) with ties counted one half; lower energy means ID."""
    ide = np.asarray(id_energies, dtype=np.float64).ravel()
    ood = np.sort(np.asarray(ood_energies, dtype=np.float64).ravel())
    if ide.size == 0 or ood.size == 0:
        raise ValueError("both energy lists must be non-empty")
    above = ood.size - np.searchsorted(ood, ide, side="right")
    ties = np.searchsorted(ood, ide, side="right") - np.searchsorted(ood, ide, side="left")
    return float((above.sum() + 0.5 * ties.sum()) / (ide.size * ood.size))


def ood_separability(id_energies, ood_energies, bins: int = 50, rate: float = 0.95) -> Separability:
    ide = np.asarray(id_energies, dtype=np.float64).ravel()
    ood = np.asarray(ood_energies, dtype=np.float64).ravel()
    a = auroc(ide, ood)
    gamma = calibrate_threshold(ide, rate)
    fpr = float(np.mean(ood < gamma))
    lo, hi = float(min(ide.min(), ood.min())), float(max(ide.max(), ood.max()))
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    return Separability(a, fpr, gamma, edges, np.histogram(ide, edges)[0], np.histogram(ood, edges)[0])


# --- latency --------------------------------------------------------------------------

STAGES = ("projection", "ground", "cluster", "network")


@dataclass
class BenchResult:
    runs: list[dict[str, float]]  # seconds per stage plus "total"
    threads: int
    meta: dict[str, str]

    def _ms(self, key):
        return np.array([r[key] for r in self.runs]) * 1e3

    def median_ms(self, key="total") -> float:
        return float(np.median(self._ms(key)))

    def p95_ms(self, key="total") -> float:
        return float(np.percentile(self._ms(key), 95))

    @property
    def fps(self) -> float:
        return 1000.0 / self.median_ms()

    def summary(self) -> dict[str, float]:
        out = {}
        for k in STAGES + ("total",):
            out[f"{k}_median_ms"] = self.median_ms(k)
            out[f"{k}_p95_ms"] = self.p95_ms(k)
        out["fps"] = self.fps
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["run", *[f"{s}_ms" for s in STAGES], "total_ms", "threads"])
            for i, r in enumerate(self.runs):
                wr.writerow([i, *[f"{r[s] * 1e3:.4f}" for s in STAGES], f"{r['total'] * 1e3:.4f}", self.threads])


def benchmark(pipeline: Callable, scans: Iterable, repeats: int = 5, threads: int = 1,
              warmup: int = 1) -> BenchResult:
    """Time ``pipeline(scan)`` over every scan ``repeats`` times.

    ``pipeline`` must return an object with a ``timings`` dict holding the
    per-stage seconds. The whole run is pinned to ``threads`` BLAS/OpenMP
    threads after ``warmup`` untimed calls on the first scan.
    """
    scans = list(scans)
    if not scans:
        raise ValueError("no scans to benchmark")
    runs = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            pipeline(scans[0])
        for _ in range(repeats):
            for s in scans:
                t0 = time.perf_counter()
                res = pipeline(s)
                total = time.perf_counter() - t0
                row = {k: float(res.timings.get(k, 0.0)) for k in STAGES}
                row["total"] = total
                runs.append(row)
    meta = {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "python": platform.python_version(), "cpu_count": str(os.cpu_count())}
    return BenchResult(runs, threads, meta)
