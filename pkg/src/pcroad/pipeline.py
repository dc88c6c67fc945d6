"""Scan -> detections: projection, ground removal, clustering, two gated networks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterLabels, cluster_depth
from .config import ConfigError, PipelineConfig
from .ground import GroundMask, segment_ground
from .networks import (ConfigurationError, Detection, NetworkWeights, box_energy_logits, box_pass,
                       classifier_pass, decode_box, energy_score, softmax, BoxPrediction)
from .projection import OrganizedCloud, project_cloud, read_velodyne_bin
from .proposals import Proposal, extract_proposals
from .weights_io import ArchiveError, load_weights


@dataclass(frozen=True)
class ScanCounts:
    points: int = 0
    ground_points: int = 0
    clusters: int = 0
    proposals: int = 0
    gate1: int = 0
    gate2: int = 0


@dataclass
class ScanResult:
    detections: list[Detection]
    timings: dict[str, float]
    counts: ScanCounts
    cloud: OrganizedCloud | None = None
    ground: GroundMask | None = None
    clusters: ClusterLabels | None = None
    proposals: list[Proposal] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Weights:
    classifier: NetworkWeights
    box: NetworkWeights

    @classmethod
    def load(cls, cfg: PipelineConfig) -> "Weights":
        p = cfg.pipeline
        if not p.classifier_weights or not p.box_weights:
            raise ConfigError("pipeline.classifier_weights and pipeline.box_weights must be set")
        try:
            w = cls(load_weights(p.classifier_weights), load_weights(p.box_weights))
        except (OSError, ArchiveError, ConfigurationError) as exc:
            raise ConfigError(f"cannot load weights: {exc}") from None
        if w.classifier.kind != "classifier" or w.box.kind != "box":
            raise ConfigError("weight archives are swapped or of the wrong kind")
        return w


def _stack(proposals: list[Proposal], dtype):
    pts = np.stack([p.canonical_points for p in proposals]).astype(dtype, copy=False)
    vox = np.stack([p.voxel_features for p in proposals]).astype(dtype, copy=False)
    return pts, vox


def detect_scan(points, cfg: PipelineConfig, weights: Weights) -> ScanResult:
    """Run every stage on one scan. Timings are in seconds per stage."""
    t0 = time.perf_counter()
    cloud = project_cloud(points, cfg.projection)
    t1 = time.perf_counter()
    ground, _ = segment_ground(cloud, cfg.ground, rng_seed=cfg.pipeline.seed)
    t2 = time.perf_counter()
    clusters = cluster_depth(cloud, ground, cfg.cluster)
    proposals = extract_proposals(cloud, clusters, cfg.proposal, seed=cfg.pipeline.seed)
    t3 = time.perf_counter()

    detections: list[Detection] = []
    gate1 = 0
    if proposals:
        wc, wb = weights.classifier, weights.box
        pts, vox = _stack(proposals, wc.dtype)
        logits, _ = classifier_pass(wc, pts, vox if wc.pvle_enabled else None)
        e_c = energy_score(logits, cfg.energy.T)
        keep = np.flatnonzero(np.atleast_1d(e_c) < cfg.energy.gamma_c)
        gate1 = len(keep)
        if gate1:
            bpts, bvox = pts[keep].astype(wb.dtype, copy=False), vox[keep].astype(wb.dtype, copy=False)
            out, tdelta, ryaw, _ = box_pass(wb, bpts, bvox if wb.pvle_enabled else None)
            preds = BoxPrediction.from_raw(out.astype(np.float64), tdelta.astype(np.float64),
                                           ryaw.astype(np.float64))
            e_b = np.atleast_1d(energy_score(box_energy_logits(preds), cfg.energy.T))
            probs = softmax(logits[keep], cfg.energy.T)
            for j, i in enumerate(keep):
                if e_b[j] >= cfg.energy.gamma_b:
                    continue
                box, degenerate = decode_box(preds[j], proposals[i], cfg.pipeline.min_box_size)
                detections.append(Detection(box, probs[j], float(e_c[i]), float(e_b[j]),
                                            proposals[i].cluster_id, degenerate))
    t4 = time.perf_counter()
    counts = ScanCounts(int(np.count_nonzero(cloud.valid)), int(np.count_nonzero(ground.mask)),
                        clusters.n_clusters, len(proposals), gate1, len(detections))
    timings = {"projection": t1 - t0, "ground": t2 - t1, "cluster": t3 - t2, "network": t4 - t3}
    return ScanResult(detections, timings, counts, cloud, ground, clusters, proposals)


class Pipeline:
    """Callable wrapper holding config and weights (usable with ``benchmark``)."""

    def __init__(self, cfg: PipelineConfig, weights: Weights | None = None):
        self.cfg = cfg
        self.weights = weights if weights is not None else Weights.load(cfg)

    def __call__(self, points) -> ScanResult:
        return detect_scan(points, self.cfg, self.weights)


# --- inputs and outputs -------------------------------------------------------------

def read_scan(path) -> np.ndarray:
    """N x 3 points from a KITTI ``.bin`` scan or a ``.npy`` array."""
    path = str(path)
    if not path.endswith(".npy"):
        return read_velodyne_bin(path)
    arr = np.load(path)
    if arr.ndim != 2 or arr.shape[1] < 3:
        raise ValueError(f"{path}: expected an N x 3 (or wider) array")
    return np.asarray(arr[:, :3], dtype=np.float64)


def match_scene(detections, gts, iou_th: float = 0.5) -> tuple[int, int]:
    """(true positives, false positives): greedy by score, same class, IoU >= ``iou_th``."""
    from .evaluation import iou3d
    used, tp = set(), 0
    for d in sorted(detections, key=lambda d: -d.score):
        best, best_j = 0.0, -1
        for j, (label, box) in enumerate(gts):
            if j in used or label != d.label:
                continue
            v = iou3d(d.box, box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_th:
            used.add(best_j)
            tp += 1
    return tp, len(detections) - tp


def format_detection(frame: int, det: Detection) -> str:
    b = det.box
    return (f"{frame:06d} {det.class_name} {det.score:.6f} "
            f"{b.center[0]:.4f} {b.center[1]:.4f} {b.center[2]:.4f} "
            f"{b.size[0]:.4f} {b.size[1]:.4f} {b.size[2]:.4f} {b.yaw:.6f}")


def parse_detection_line(line: str):
    """Inverse of :func:`format_detection` -> (frame, class name, score, Box3D)."""
    from .boxes import Box3D
    f = line.split()
    if len(f) != 10:
        raise ValueError(f"detection line needs 10 fields, got {len(f)}")
    v = [float(x) for x in f[3:]]
    return int(f[0]), f[1], float(f[2]), Box3D(v[0:3], v[3:6], v[6])


_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [0, 128, 128]],
                    dtype=np.uint8)


def write_ply(path, result: ScanResult) -> None:
    """ASCII PLY of the valid cells: ground grey, clusters by id, detected clusters red."""
    cloud = result.cloud
    valid = cloud.valid
    xyz = np.stack([cloud.X[valid], cloud.Y[valid], cloud.Z[valid]], axis=1)
    labels = result.clusters.labels[valid] if result.clusters is not None else np.zeros(len(xyz), int)
    ground = result.ground.mask[valid] if result.ground is not None else np.zeros(len(xyz), bool)
    rgb = np.full((len(xyz), 3), 255, dtype=np.uint8)
    rgb[ground] = (128, 128, 128)
    clustered = labels > 0
    rgb[clustered] = _PALETTE[labels[clustered] % len(_PALETTE)]
    detected = np.isin(labels, [d.cluster_id for d in result.detections]) & clustered
    rgb[detected] = (255, 0, 0)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(xyz)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("property int cluster\nend_header\n")
        for p, c, k in zip(xyz, rgb, labels):
            fh.write(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {c[0]} {c[1]} {c[2]} {k}\n")


def calibrate_gates(weights: Weights, points: np.ndarray, vox: np.ndarray, rate: float = 0.95,
                    T: float = 1.0):
    """Energy thresholds passing about ``rate`` of the given ID proposals through both gates.

    Gate 1 keeps ``sqrt(rate)`` of the samples; gate 2 is calibrated on the
    survivors so that the conjunction passes ``rate`` overall.
    """
    from .networks import EnergyConfig, calibrate_threshold
    wc, wb = weights.classifier, weights.box
    logits, _ = classifier_pass(wc, points.astype(wc.dtype), vox.astype(wc.dtype) if wc.pvle_enabled else None)
    e_c = np.atleast_1d(energy_score(logits, T))
    gamma_c = calibrate_threshold(e_c, float(np.sqrt(rate)))
    passed = e_c < gamma_c
    out, tdelta, ryaw, _ = box_pass(wb, points[passed].astype(wb.dtype),
                                    vox[passed].astype(wb.dtype) if wb.pvle_enabled else None)
    e_b = np.atleast_1d(energy_score(box_energy_logits(BoxPrediction.from_raw(out, tdelta, ryaw)), T))
    rate_b = min(rate * len(e_c) / max(1, passed.sum()), 1.0 - 1e-9)
    gamma_b = calibrate_threshold(e_b, rate_b)
    return EnergyConfig(T=T, gamma_c=gamma_c, gamma_b=gamma_b)
