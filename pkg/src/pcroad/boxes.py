"""3D box geometry shared by decoding, targets, losses and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")
NUM_CLASSES = len(CLASS_NAMES)
NUM_HEADING_BINS = 12
# l, w, h per class; one size template per class.
SIZE_TEMPLATES = np.array([
    [3.9, 1.6, 1.56],
    [0.8, 0.6, 1.73],
    [1.76, 0.6, 1.73],
])
NUM_SIZE_TEMPLATES = len(SIZE_TEMPLATES)

# Corner k has local sign pattern (CORNER_SIGNS[k] * size / 2); bottom face last.
CORNER_SIGNS = np.array([
    [1, 1, 1], [1, -1, 1], [-1, -1, 1], [-1, 1, 1],
    [1, 1, -1], [1, -1, -1], [-1, -1, -1], [-1, 1, -1],
], dtype=np.float64)
# Relabeling that maps the corners of a box onto those of the same box turned by pi.
FLIP_PERM = np.array([2, 3, 0, 1, 6, 7, 4, 5])


@dataclass(frozen=True, eq=False)
class Box3D:
    """Centre (geometric), size (l, w, h) and yaw about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "yaw", float(self.yaw))

    def corners(self) -> np.ndarray:
        return box_corners(self.center, self.size, self.yaw)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.yaw]])


def wrap_angle(a):
    """Wrap into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def heading_bin_centers(nh: int = NUM_HEADING_BINS) -> np.ndarray:
    return -np.pi + (np.arange(nh) + 0.5) * (2 * np.pi / nh)


def angle_to_bin(yaw: float, nh: int = NUM_HEADING_BINS) -> tuple[int, float]:
    """Nearest heading bin and signed residual; a yaw midway between two
    centres goes to the lower index (wrapping at -pi)."""
    width = 2 * math.pi / nh
    y = float(wrap_angle(yaw))
    q = (y + math.pi) / width
    # Snap near-boundary values so midpoints built in floating point tie-break consistently.
    k = (round(q) if abs(q - round(q)) < 1e-9 else math.ceil(q)) - 1
    k %= nh
    residual = float(wrap_angle(y - heading_bin_centers(nh)[k]))
    if residual < -width / 2:  # wrap_angle maps +pi to -pi
        residual += 2 * math.pi
    return int(k), residual


def box_corners(center, size, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    local = CORNER_SIGNS * (np.asarray(size, dtype=np.float64) / 2.0)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


def box_corners_batch(center: np.ndarray, size: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """(B, 8, 3) corners for (B, 3) centres/sizes and (B,) yaws."""
    local = CORNER_SIGNS[None] * (size[:, None, :] / 2.0)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y, local[..., 2]], axis=-1) + center[:, None, :]
