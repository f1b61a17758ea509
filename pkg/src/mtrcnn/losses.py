"""Task losses for detection, pose and action heads and their weighted sum.

Detection and action gradients are taken with respect to the pre-softmax logits
(softmax folded into the cross-entropy); pose gradients are with respect to the
raw coordinate outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import NormalizedKeypoint
from .labeling import DetLabel, RegionSample

LOG_FLOOR = 1e-12


class _ClampCounter:
    """Counts how often a probability hit the log floor."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


log_clamps = _ClampCounter()


def _safe_log(p):
    p = np.asarray(p, dtype=np.float64)
    clamped = p < LOG_FLOOR
    n = int(np.count_nonzero(clamped))
    if n:
        log_clamps.count += n
    return np.log(np.where(clamped, LOG_FLOOR, p))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TaskWeights:
    lambda_D: float = 1.0
    lambda_P: float = 1.0
    lambda_A: float = 1.0

    def __post_init__(self):
        for name in ("lambda_D", "lambda_P", "lambda_A"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def trainable(self) -> bool:
        return self.lambda_D > 0 or self.lambda_P > 0 or self.lambda_A > 0

    def as_tuple(self):
        return (self.lambda_D, self.lambda_P, self.lambda_A)


@dataclass
class HeadOutputs:
    """Network outputs for one region, or a batch when arrays carry a leading axis."""

    det_probs: np.ndarray
    pose_coords: np.ndarray
    action_probs: np.ndarray
    features: dict = field(default_factory=dict)

    def __getitem__(self, i) -> "HeadOutputs":
        return HeadOutputs(
            self.det_probs[i],
            self.pose_coords[i],
            self.action_probs[i],
            {k: v[i] for k, v in self.features.items()},
        )

    def __len__(self):
        return len(self.det_probs) if self.det_probs.ndim == 2 else 1


def loss_detection(det_probs, l: int):
    """Log loss on the person/background probability pair; gradient is w.r.t. logits."""
    p = np.asarray(det_probs, dtype=np.float64)
    if l not in (0, 1):
        raise ValueError(f"detection label must be 0 or 1, got {l}")
    value = float(-_safe_log(p[l]))
    grad = p.copy()
    grad[l] -= 1.0
    return value, grad


def loss_pose(pose_coords, targets: Optional[Sequence[NormalizedKeypoint]]):
    """Visibility-masked squared error, divided by the total keypoint count."""
    pred = np.asarray(pose_coords, dtype=np.float64)
    if targets is None:
        return 0.0, np.zeros_like(pred)
    k = len(targets)
    if pred.shape != (2 * k,):
        raise ValueError(f"pose output has shape {pred.shape}, expected ({2 * k},)")
    tgt = np.array([[t.x, t.y] for t in targets]).ravel()
    vis = np.repeat(np.array([1.0 if t.v else 0.0 for t in targets]), 2)
    resid = np.where(vis > 0, pred - tgt, 0.0)
    value = float(np.sum(resid * resid) / k)
    return value, (2.0 / k) * resid


def loss_action(action_probs, l: Optional[int]):
    p = np.asarray(action_probs, dtype=np.float64)
    if l is None:
        return 0.0, np.zeros_like(p)
    value = float(-_safe_log(p[l]))
    grad = p.copy()
    grad[l] -= 1.0
    return value, grad


def loss_total(outputs: HeadOutputs, sample: RegionSample, w: TaskWeights):
    """Weighted sum of the three task losses for one sample.

    Returns ``(total, parts, grads)``; ``parts`` holds the unweighted per-task values
    and ``grads`` the weighted gradients keyed ``det``, ``pose``, ``action``.
    """
    parts = {"det": 0.0, "pose": 0.0, "action": 0.0}
    grads = {
        "det": np.zeros(2),
        "pose": np.zeros_like(np.asarray(outputs.pose_coords, dtype=np.float64)),
        "action": np.zeros_like(np.asarray(outputs.action_probs, dtype=np.float64)),
    }
    if w.lambda_D > 0 and sample.det_label != DetLabel.IGNORE:
        v, g = loss_detection(outputs.det_probs, int(sample.det_label))
        parts["det"], grads["det"] = v, w.lambda_D * g
    if w.lambda_P > 0 and sample.pose_targets is not None:
        v, g = loss_pose(outputs.pose_coords, sample.pose_targets)
        parts["pose"], grads["pose"] = v, w.lambda_P * g
    if w.lambda_A > 0 and sample.action_label is not None:
        v, g = loss_action(outputs.action_probs, sample.action_label)
        parts["action"], grads["action"] = v, w.lambda_A * g
    total = w.lambda_D * parts["det"] + w.lambda_P * parts["pose"] + w.lambda_A * parts["action"]
    return total, parts, grads


@dataclass
class BatchTargets:
    """Dense per-batch label arrays; -1 marks an inactive detection or action label."""

    det: np.ndarray  # (B,) int
    pose: np.ndarray  # (B, 2K)
    pose_vis: np.ndarray  # (B, 2K), zero rows for inactive samples
    action: np.ndarray  # (B,) int

    @classmethod
    def from_samples(cls, samples: Sequence[RegionSample], num_keypoints: int) -> "BatchTargets":
        b = len(samples)
        det = np.full(b, -1, dtype=np.int64)
        pose = np.zeros((b, 2 * num_keypoints))
        vis = np.zeros((b, 2 * num_keypoints))
        act = np.full(b, -1, dtype=np.int64)
        for i, s in enumerate(samples):
            if s.det_label != DetLabel.IGNORE:
                det[i] = int(s.det_label)
            if s.pose_targets is not None:
                pose[i] = np.array([[t.x, t.y] for t in s.pose_targets]).ravel()
                vis[i] = np.repeat([1.0 if t.v else 0.0 for t in s.pose_targets], 2)
            if s.action_label is not None:
                act[i] = s.action_label
        return cls(det, pose, vis, act)

    def take(self, idx) -> "BatchTargets":
        return BatchTargets(self.det[idx], self.pose[idx], self.pose_vis[idx], self.action[idx])


def batch_loss_total(det_probs, pose_coords, action_probs, targets: BatchTargets, w: TaskWeights):
    """Minibatch version of :func:`loss_total`, averaged over the batch.

    Returns ``(total, parts, grads)`` where grads are already weighted and divided by B.
    Heads with zero weight get exact-zero gradients.
    """
    b = det_probs.shape[0]
    k = pose_coords.shape[1] // 2
    parts = {"det": 0.0, "pose": 0.0, "action": 0.0}
    grads = {
        "det": np.zeros_like(det_probs),
        "pose": np.zeros_like(pose_coords),
        "action": np.zeros_like(action_probs),
    }
    det_on = targets.det >= 0
    if w.lambda_D > 0 and det_on.any():
        rows = np.nonzero(det_on)[0]
        lab = targets.det[rows]
        parts["det"] = float(-_safe_log(det_probs[rows, lab]).sum() / b)
        g = det_probs[rows].copy()
        g[np.arange(len(rows)), lab] -= 1.0
        grads["det"][rows] = (w.lambda_D / b) * g
    if w.lambda_P > 0 and targets.pose_vis.any():
        resid = np.where(targets.pose_vis > 0, pose_coords - targets.pose, 0.0)
        parts["pose"] = float(np.sum(resid * resid) / k / b)
        grads["pose"] = (w.lambda_P * 2.0 / (k * b)) * resid
    act_on = targets.action >= 0
    if w.lambda_A > 0 and act_on.any():
        rows = np.nonzero(act_on)[0]
        lab = targets.action[rows]
        parts["action"] = float(-_safe_log(action_probs[rows, lab]).sum() / b)
        g = action_probs[rows].copy()
        g[np.arange(len(rows)), lab] -= 1.0
        grads["action"][rows] = (w.lambda_A / b) * g
    total = w.lambda_D * parts["det"] + w.lambda_P * parts["pose"] + w.lambda_A * parts["action"]
    return total, parts, grads
