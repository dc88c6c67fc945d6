"""KITTI object labels and calibration, converted to the LiDAR frame."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import CLASS_NAMES, Box3D
from .evaluation import GTBox


class LabelFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class KittiObject:
    type: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom (px)
    h: float
    w: float
    l: float
    location: tuple[float, float, float]  # bottom centre, rectified camera frame
    ry: float
    score: float | None = None

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]


def parse_label_line(line: str, lineno: int = 1, path="<labels>") -> KittiObject:
    f = line.split()
    if len(f) not in (15, 16):
        raise LabelFormatError(path, lineno, f"expected 15 fields, got {len(f)}")
    try:
        v = [float(x) for x in f[1:]]
    except ValueError as exc:
        raise LabelFormatError(path, lineno, str(exc)) from None
    return KittiObject(f[0], v[0], int(v[1]), v[2], tuple(v[3:7]), v[7], v[8], v[9],
                       tuple(v[10:13]), v[13], v[14] if len(v) == 15 else None)


@dataclass(frozen=True, eq=False)
class KittiCalib:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    @classmethod
    def axis_swap(cls) -> "KittiCalib":
        """Camera frame (x right, y down, z forward) aligned with the LiDAR origin."""
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(np.eye(3, 4), np.eye(3), tr)

    def rect_to_velo(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.R0_rect, pts.T)
        tr = np.vstack([self.Tr_velo_to_cam, [0.0, 0.0, 0.0, 1.0]])
        homo = np.vstack([cam, np.ones(len(pts))])
        return np.linalg.solve(tr, homo)[:3].T


def read_calib(path) -> KittiCalib:
    vals = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals[key.strip()] = np.array([float(x) for x in rest.split()])
    try:
        return KittiCalib(vals["P2"].reshape(3, 4), vals["R0_rect"].reshape(3, 3),
                          vals["Tr_velo_to_cam"].reshape(3, 4))
    except KeyError as exc:
        raise ValueError(f"{path}: missing calibration entry {exc}") from None


def object_to_box(obj: KittiObject, calib: KittiCalib) -> Box3D:
    """LiDAR-frame box: bottom centre lifted by h/2, yaw = -ry - pi/2."""
    bottom = calib.rect_to_velo(np.array(obj.location))[0]
    yaw = (-obj.ry - math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
    return Box3D(bottom + np.array([0.0, 0.0, obj.h / 2]), [obj.l, obj.w, obj.h], yaw)


# Difficulty bounds: minimum box height (px), maximum occlusion level, maximum truncation.
DIFFICULTY = {"easy": (40.0, 0, 0.15), "moderate": (25.0, 1, 0.30), "hard": (25.0, 2, 0.50)}


def meets_difficulty(obj: KittiObject, level: str) -> bool:
    min_h, max_occ, max_trunc = DIFFICULTY[level]
    return obj.height_px >= min_h and obj.occlusion <= max_occ and obj.truncation <= max_trunc


@dataclass
class KittiLabels:
    boxes: list[GTBox]            # ID classes (ignore flag set by difficulty filtering)
    ignored: list[KittiObject]    # DontCare and every other class
    objects: list[KittiObject]


def load_kitti_labels(path, calib: KittiCalib | None = None, frame: int = 0,
                      difficulty: str | None = None) -> KittiLabels:
    """Parse one label file; ID objects become LiDAR-frame boxes."""
    calib = calib or KittiCalib.axis_swap()
    boxes, ignored, objects = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = parse_label_line(line, lineno, path)
            objects.append(obj)
            if obj.type not in CLASS_NAMES:
                ignored.append(obj)
                continue
            ignore = difficulty is not None and not meets_difficulty(obj, difficulty)
            boxes.append(GTBox(CLASS_NAMES.index(obj.type), object_to_box(obj, calib), frame, ignore))
    return KittiLabels(boxes, ignored, objects)


def frame_id(path) -> int:
    try:
        return int(Path(path).stem)
    except ValueError:
        return 0


def box_to_label_line(class_name: str, box: Box3D, calib: KittiCalib | None = None,
                      bbox=(0.0, 0.0, 100.0, 100.0), score: float | None = None) -> str:
    """Inverse of :func:`object_to_box`; the 2D box is a placeholder unless given."""
    calib = calib or KittiCalib.axis_swap()
    bottom = np.asarray(box.center, dtype=np.float64) - np.array([0.0, 0.0, box.size[2] / 2])
    cam = calib.Tr_velo_to_cam @ np.append(bottom, 1.0)
    rect = calib.R0_rect @ cam
    ry = (-box.yaw - math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
    alpha = ry - math.atan2(rect[0], rect[2])
    l, w, h = (float(v) for v in box.size)
    fields = [class_name, "0.00", "0", f"{alpha:.6f}", *(f"{v:.2f}" for v in bbox),
              f"{h:.6f}", f"{w:.6f}", f"{l:.6f}", *(f"{v:.6f}" for v in rect), f"{ry:.6f}"]
    if score is not None:
        fields.append(f"{score:.6f}")
    return " ".join(fields)
