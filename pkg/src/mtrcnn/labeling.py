"""Per-task training labels for region proposals, and jitter augmentation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import NUM_KEYPOINTS, Box, Keypoint, NormalizedKeypoint, iou, normalize_keypoints

ACTIONS = (
    "jumping",
    "phoning",
    "playinginstrument",
    "reading",
    "ridingbike",
    "ridinghorse",
    "running",
    "takingphoto",
    "usingcomputer",
    "walking",
)
NUM_ACTIONS = len(ACTIONS)

DET_POSITIVE_IOU = 0.5
DET_NEGATIVE_IOU = 0.3
POSE_IOU = 0.5
ACTION_IOU = 0.7


class DetLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORE = -1


@dataclass(frozen=True)
class Instance:
    """A ground-truth person. ``action`` is a 0-based index into the action vocabulary."""

    box: Box
    keypoints: Optional[tuple[Keypoint, ...]] = None
    action: Optional[int] = None

    def __post_init__(self):
        if self.keypoints is not None:
            object.__setattr__(self, "keypoints", tuple(self.keypoints))
            if len(self.keypoints) != NUM_KEYPOINTS:
                raise ValueError(f"instance needs {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}")
        if self.action is not None and not (0 <= self.action < NUM_ACTIONS):
            raise ValueError(f"action index {self.action} outside [0, {NUM_ACTIONS})")


@dataclass(frozen=True)
class RegionSample:
    region: Box
    det_label: DetLabel
    pose_targets: Optional[tuple[NormalizedKeypoint, ...]] = None
    action_label: Optional[int] = None
    matched_instance: Optional[int] = None

    @property
    def pose_active(self) -> bool:
        return self.pose_targets is not None

    @property
    def action_active(self) -> bool:
        return self.action_label is not None


def best_match(region: Box, instances: Sequence[Instance]) -> tuple[Optional[int], float]:
    """Index and IoU of the best-overlapping instance; lowest index wins exact ties."""
    best, best_iou = None, 0.0
    for i, inst in enumerate(instances):
        o = iou(region, inst.box)
        if best is None or o > best_iou:
            best, best_iou = i, o
    return best, best_iou


def _det_label_from_iou(o: float) -> DetLabel:
    if o > DET_POSITIVE_IOU:
        return DetLabel.POSITIVE
    if o < DET_NEGATIVE_IOU:
        return DetLabel.NEGATIVE
    return DetLabel.IGNORE


def label_detection(region: Box, instances: Sequence[Instance]) -> DetLabel:
    _, o = best_match(region, instances)
    return _det_label_from_iou(o)


def label_pose(region: Box, instances: Sequence[Instance]):
    """Returns ``(instance index, normalized targets)`` or None."""
    idx, o = best_match(region, instances)
    if idx is None or not o > POSE_IOU or instances[idx].keypoints is None:
        return None
    return idx, tuple(normalize_keypoints(instances[idx].keypoints, region))


def label_action(region: Box, instances: Sequence[Instance]) -> Optional[int]:
    idx, o = best_match(region, instances)
    if idx is None or not o > ACTION_IOU:
        return None
    return instances[idx].action


def jitter_augment(
    instance: Instance,
    count: int = 100,
    min_iou: float = 0.7,
    rng_seed: int = 0,
    center_range: float = 0.2,
    scale_range: float = 0.2,
) -> list[Box]:
    """Rejection-sample ``count`` perturbed copies of the instance box with IoU >= ``min_iou``.

    Centers move uniformly by up to ``center_range`` of the box width/height, and each
    side length is scaled by ``exp(u)`` with ``u`` uniform in ``±log(1 + scale_range)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if not 0 < min_iou <= 1:
        raise ValueError("min_iou must lie in (0, 1]")
    rng = np.random.default_rng(rng_seed)
    box = instance.box
    if center_range == 0 and scale_range == 0:
        return [box] * count
    cx, cy = box.center
    w, h = box.width, box.height
    log_s = math.log1p(scale_range)
    out: list[Box] = []
    max_draws = 10_000 * count
    draws = 0
    chunk = max(16, 2 * count)
    while len(out) < count:
        if draws >= max_draws:
            raise RuntimeError(
                f"jitter_augment: {len(out)}/{count} boxes after {draws} draws; "
                f"min_iou={min_iou} unreachable with the perturbation ranges"
            )
        u = rng.uniform(-1.0, 1.0, size=(chunk, 4))
        for du, dv, su, sv in u:
            draws += 1
            cand = Box.from_center(
                cx + du * center_range * w,
                cy + dv * center_range * h,
                w * math.exp(su * log_s),
                h * math.exp(sv * log_s),
            )
            if iou(cand, box) >= min_iou:
                out.append(cand)
                if len(out) == count:
                    break
            if draws >= max_draws:
                break
    return out


def build_samples(proposals: Sequence[Box], instances: Sequence[Instance]) -> list[RegionSample]:
    samples = []
    for region in proposals:
        idx, o = best_match(region, instances)
        det = _det_label_from_iou(o)
        pose = None
        action = None
        if idx is not None:
            inst = instances[idx]
            if o > POSE_IOU and inst.keypoints is not None:
                pose = tuple(normalize_keypoints(inst.keypoints, region))
            if o > ACTION_IOU:
                action = inst.action
        matched = idx if (det == DetLabel.POSITIVE or pose is not None or action is not None) else None
        samples.append(RegionSample(region, det, pose, action, matched))
    return samples
