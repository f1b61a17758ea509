"""Precision-recall machinery and the four evaluation protocols.

* person detection AP (box matching at IoU > 0.5),
* APK: keypoint AP where a prediction is correct within ``alpha * torso height``,
* action classification AP on ground-truth boxes,
* action detection AP: (person, action) pairs treated as detection classes.

All thresholds are strict. Predictions are ranked by descending score with ties
kept in input order for matching; precision-recall points are taken only at
distinct score thresholds, so a block of tied predictions moves the curve in a
single step.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import KEYPOINT_NAMES, Box, boxes_to_array, iou_matrix, torso_height
from .labeling import ACTIONS, Instance


@dataclass(frozen=True)
class ScoredPrediction:
    """A scored box (``box`` + class ``label``) or keypoint (``keypoint`` + keypoint type ``label``)."""

    image_id: str
    score: float
    label: int = 0
    box: Optional[Box] = None
    keypoint: Optional[tuple] = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")
        if (self.box is None) == (self.keypoint is None):
            raise ValueError("prediction needs exactly one of box / keypoint")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    n_positives: int
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))  # per prediction, ranked
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))  # ranked


@dataclass
class APResult:
    names: tuple
    ap: np.ndarray
    n_positives: np.ndarray
    curves: list = field(default_factory=list)
    excluded: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.ap)) if len(self.ap) else 0.0

    def as_dict(self) -> dict:
        return {n: float(a) for n, a in zip(self.names, self.ap)}


def ranking(scores) -> np.ndarray:
    """Descending-score order, ties in input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def pr_curve(scores, tp, n_positives: int, ranked: bool = False) -> PRCurve:
    """Build a PR curve from per-prediction TP flags.

    ``tp`` is aligned with ``scores``; pass ``ranked=True`` if both are already in
    ranking order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if not ranked:
        order = ranking(scores)
        scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    if len(scores):
        last = np.r_[scores[1:] != scores[:-1], True]
    else:
        last = np.zeros(0, dtype=bool)
    ctp_t, cfp_t = ctp[last], cfp[last]
    recall = ctp_t / n_positives if n_positives > 0 else np.zeros(len(ctp_t))
    precision = ctp_t / np.maximum(ctp_t + cfp_t, 1)
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64), scores[last], int(n_positives), tp, scores)


def average_precision(curve: PRCurve, method: str = "continuous") -> float:
    """Area under the PR curve.

    ``continuous``: all-points area under the precision envelope (precision at each
    recall replaced by the best precision at that recall or beyond).
    ``11point``: mean envelope precision at recall 0, 0.1, ..., 1.
    ``raw``: sum of recall increments times the precision at that point, no envelope.
    """
    if curve.n_positives <= 0:
        warnings.warn("average precision with zero positives; defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if len(curve.recall) == 0:
        return 0.0
    rec = np.concatenate([[0.0], curve.recall])
    prec = np.concatenate([[0.0], curve.precision])
    if method == "raw":
        return float(np.sum(np.diff(rec) * prec[1:]))
    env = np.maximum.accumulate(prec[::-1])[::-1]
    if method == "continuous":
        return float(np.sum(np.diff(rec) * env[1:]))
    if method == "11point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            ok = curve.recall >= t - 1e-12
            total += float(curve.precision[ok].max()) if ok.any() else 0.0
        return total / 11.0
    raise ValueError(f"unknown AP method {method!r}")


def tie_permutation_spread(scores, tp, n_positives: int, n_perm: int = 200, seed: int = 0, method="continuous"):
    """(min, max) AP over random reorderings within tied-score blocks, for the given TP flags.

    Only meaningful when TP flags do not depend on the order (e.g. classification).
    """
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_perm):
        perm = rng.permutation(len(scores))
        order = perm[np.argsort(-scores[perm], kind="stable")]
        s, t = scores[order], tp[order]
        # break ties by the permutation: points at every prediction
        ctp = np.cumsum(t)
        cfp = np.cumsum(~t)
        c = PRCurve(ctp / n_positives, ctp / (ctp + cfp), s, n_positives)
        vals.append(average_precision(c, method) if n_positives else 0.0)
    return float(min(vals)), float(max(vals))


# ---------------------------------------------------------------------------
# box matching


def _group(preds, key):
    groups = defaultdict(list)
    for i, p in enumerate(preds):
        groups[key(p)].append(i)
    return groups


def match_detections(
    preds: Sequence[ScoredPrediction],
    gts: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> PRCurve:
    """Greedy VOC-style matching of scored boxes to ground truth.

    Predictions are visited in ranking order; a prediction is a TP when some
    not-yet-matched ground truth box in its image overlaps it with IoU strictly above
    ``iou_threshold`` (the best-overlapping such box is consumed), otherwise an FP.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    n_pos = sum(len(v) for v in gts.values())
    scores = np.array([p.score for p in preds], dtype=np.float64)
    order = ranking(scores)
    gt_arrays = {k: boxes_to_array(v) for k, v in gts.items()}
    overlaps = {}
    for img, idx in _group(preds, lambda p: p.image_id).items():
        g = gt_arrays.get(img)
        if g is None or len(g) == 0:
            continue
        pb = boxes_to_array([preds[i].box for i in idx])
        m = iou_matrix(pb, g)
        for row, i in enumerate(idx):
            overlaps[i] = m[row]
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arrays.items()}
    tp = np.zeros(len(preds), dtype=bool)
    for r, i in enumerate(order):
        o = overlaps.get(i)
        if o is None:
            continue
        cand = np.where(~used[preds[i].image_id] & (o > iou_threshold), o, -1.0)
        j = int(np.argmax(cand))
        if cand[j] > iou_threshold:
            used[preds[i].image_id][j] = True
            tp[r] = True
    return pr_curve(scores[order], tp, n_pos, ranked=True)


def non_max_suppression(boxes, scores, iou_threshold: float = 0.3) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    b = boxes_to_array(boxes) if not isinstance(boxes, np.ndarray) else boxes.reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = ranking(scores)
    if len(order) == 0:
        return order
    m = iou_matrix(b, b)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= m[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def nms_predictions(preds: Sequence[ScoredPrediction], iou_threshold: float = 0.3) -> list:
    """Per (image, class) NMS over box predictions, preserving input order of survivors."""
    keep = []
    for _, idx in _group(preds, lambda p: (p.image_id, p.label)).items():
        kept = non_max_suppression([preds[i].box for i in idx], [preds[i].score for i in idx], iou_threshold)
        keep.extend(idx[k] for k in kept)
    return [preds[i] for i in sorted(keep)]


def evaluate_detection(
    preds: Sequence[ScoredPrediction],
    gts: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
    method: str = "continuous",
) -> APResult:
    curve = match_detections(preds, gts, iou_threshold)
    return APResult(("person",), np.array([average_precision(curve, method)]), np.array([curve.n_positives]), [curve])


# ---------------------------------------------------------------------------
# keypoints


def evaluate_apk(
    preds: Sequence[ScoredPrediction],
    gts: Mapping[str, Sequence[Instance]],
    alpha: float = 0.2,
    names: Sequence[str] = KEYPOINT_NAMES,
    method: str = "continuous",
) -> APResult:
    """Average precision per keypoint type.

    A keypoint prediction (``label`` = keypoint index) is a TP when some unmatched
    ground-truth instance in its image has that keypoint visible at distance strictly
    below ``alpha`` times the instance's torso height; among several candidates the
    one with the smallest distance relative to its threshold is consumed. Instances
    without a torso height are excluded as positives and cannot be matched.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n_kp = len(names)
    # per image: (instance xy (N, K, 2), visible (N, K), radius (N,))
    table = {}
    excluded = 0
    for img, insts in gts.items():
        rows = [inst for inst in insts if inst.keypoints is not None]
        heights = [torso_height(inst.keypoints) for inst in rows]
        excluded += sum(h is None for h in heights)
        rows = [(inst, h) for inst, h in zip(rows, heights) if h is not None]
        if not rows:
            continue
        xy = np.array([[(k.x, k.y) for k in inst.keypoints] for inst, _ in rows], dtype=np.float64)
        vis = np.array([[k.v for k in inst.keypoints] for inst, _ in rows], dtype=bool)
        radius = alpha * np.array([h for _, h in rows])
        table[img] = (xy, vis, radius)

    aps, npos, curves = [], [], []
    by_kp = _group(preds, lambda p: p.label)
    for k in range(n_kp):
        n_pos = int(sum(v[1][:, k].sum() for v in table.values()))
        idx = by_kp.get(k, [])
        scores = np.array([preds[i].score for i in idx], dtype=np.float64)
        order = ranking(scores)
        used = {img: np.zeros(len(v[2]), dtype=bool) for img, v in table.items()}
        tp = np.zeros(len(idx), dtype=bool)
        for r, o in enumerate(order):
            p = preds[idx[o]]
            entry = table.get(p.image_id)
            if entry is None:
                continue
            xy, vis, radius = entry
            d = np.hypot(xy[:, k, 0] - p.keypoint[0], xy[:, k, 1] - p.keypoint[1])
            ok = vis[:, k] & ~used[p.image_id] & (d < radius)
            if ok.any():
                rel = np.where(ok, d / radius, np.inf)
                used[p.image_id][int(np.argmin(rel))] = True
                tp[r] = True
        curve = pr_curve(scores[order], tp, n_pos, ranked=True)
        curves.append(curve)
        npos.append(n_pos)
        if n_pos == 0:
            aps.append(0.0)
            continue
        aps.append(average_precision(curve, method))
    return APResult(tuple(names), np.array(aps), np.array(npos), curves, excluded)


# ---------------------------------------------------------------------------
# actions


def evaluate_action_classification(
    true_actions: Sequence[int],
    scores,
    names: Sequence[str] = ACTIONS,
    method: str = "continuous",
) -> APResult:
    """AP per action over ground-truth boxes ranked by that action's score."""
    scores = np.asarray(scores, dtype=np.float64)
    true_actions = np.asarray(true_actions)
    if scores.shape != (len(true_actions), len(names)):
        raise ValueError(f"scores shape {scores.shape} != ({len(true_actions)}, {len(names)})")
    aps, npos, curves = [], [], []
    for a in range(len(names)):
        tp = true_actions == a
        curve = pr_curve(scores[:, a], tp, int(tp.sum()))
        curves.append(curve)
        npos.append(int(tp.sum()))
        aps.append(average_precision(curve, method) if tp.any() else _zero_ap_warn(names[a]))
    return APResult(tuple(names), np.array(aps), np.array(npos), curves)


def _zero_ap_warn(name):
    warnings.warn(f"class {name!r} has no positives; AP defined as 0", RuntimeWarning, stacklevel=3)
    return 0.0


def evaluate_action_detection(
    preds: Sequence[ScoredPrediction],
    gts: Mapping[str, Sequence[Instance]],
    names: Sequence[str] = ACTIONS,
    iou_threshold: float = 0.5,
    method: str = "continuous",
) -> APResult:
    """Each action is its own detection class; a TP needs IoU > 0.5 with a person doing that action."""
    by_action = _group(preds, lambda p: p.label)
    aps, npos, curves = [], [], []
    for a in range(len(names)):
        gt_a = {img: [i.box for i in insts if i.action == a] for img, insts in gts.items()}
        curve = match_detections([preds[i] for i in by_action.get(a, [])], gt_a, iou_threshold)
        curves.append(curve)
        npos.append(curve.n_positives)
        aps.append(average_precision(curve, method) if curve.n_positives else _zero_ap_warn(names[a]))
    return APResult(tuple(names), np.array(aps), np.array(npos), curves)
