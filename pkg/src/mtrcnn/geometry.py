"""Boxes, overlap and keypoint coordinate normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

KEYPOINT_NAMES = (
    "Nose",
    "R_Shoulder",
    "R_Elbow",
    "R_Wrist",
    "L_Shoulder",
    "L_Elbow",
    "L_Wrist",
    "R_Hip",
    "R_Knee",
    "R_Ankle",
    "L_Hip",
    "L_Knee",
    "L_Ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
KP = {name: i for i, name in enumerate(KEYPOINT_NAMES)}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with continuous corners, ``x_min < x_max``, ``y_min < y_max``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scale(self, s: float) -> "Box":
        return Box(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    v: bool = True


@dataclass(frozen=True)
class NormalizedKeypoint:
    """Keypoint relative to a region: origin at the center, unit = region width/height."""

    x: float
    y: float
    v: bool = True


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes], dtype=np.float64)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box collections (``Box`` sequences or ``(N, 4)`` arrays).

    Agrees elementwise with :func:`iou`, which it mirrors operation for operation.
    """
    a = boxes_to_array(a) if not isinstance(a, np.ndarray) else a.reshape(-1, 4)
    b = boxes_to_array(b) if not isinstance(b, np.ndarray) else b.reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / union, 0.0)


def normalize_keypoints(kps: Sequence[Keypoint], region: Box) -> list[NormalizedKeypoint]:
    cx, cy = region.center
    w, h = region.width, region.height
    return [NormalizedKeypoint((k.x - cx) / w, (k.y - cy) / h, k.v) for k in kps]


def denormalize_keypoints(nkps: Sequence[NormalizedKeypoint], region: Box) -> list[Keypoint]:
    cx, cy = region.center
    w, h = region.width, region.height
    return [Keypoint(k.x * w + cx, k.y * h + cy, k.v) for k in nkps]


def denormalize_coords(coords: np.ndarray, region: Box) -> np.ndarray:
    """Map a flat ``(x0, y0, x1, y1, ...)`` prediction vector to a ``(K, 2)`` image-space array."""
    xy = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    cx, cy = region.center
    return np.column_stack([xy[:, 0] * region.width + cx, xy[:, 1] * region.height + cy])


def torso_height(kps: Sequence[Keypoint]) -> Optional[float]:
    """Distance from the shoulder midpoint to the hip midpoint.

    Returns None when any shoulder or hip is invisible, or the distance is not positive.
    """
    if len(kps) != NUM_KEYPOINTS:
        raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got {len(kps)}")
    rs, ls = kps[KP["R_Shoulder"]], kps[KP["L_Shoulder"]]
    rh, lh = kps[KP["R_Hip"]], kps[KP["L_Hip"]]
    if not (rs.v and ls.v and rh.v and lh.v):
        return None
    sx, sy = 0.5 * (rs.x + ls.x), 0.5 * (rs.y + ls.y)
    hx, hy = 0.5 * (rh.x + lh.x), 0.5 * (rh.y + lh.y)
    h = math.hypot(hx - sx, hy - sy)
    return h if h > 0 else None
