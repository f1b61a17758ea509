"""Linear SVMs for keypoint confidences, action classifiers and context rescoring."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix, torso_height
from .labeling import NUM_ACTIONS, Instance

CONTEXT_OBJECTS = ("horse", "bike", "motorcycle", "tvmonitor")
CONTEXT_IOU = 0.1


@dataclass
class LinearSvm:
    w: np.ndarray
    b: float
    C: float = 1.0
    seed: int = 0

    @property
    def dim(self) -> int:
        return len(self.w)


def svm_objective(model_or_w, b=None, X=None, y=None, C=None) -> float:
    """``0.5 * |w|^2 + C * sum(hinge)``; call as ``svm_objective(model, X=..., y=...)`` or with raw w, b."""
    if isinstance(model_or_w, LinearSvm):
        w, b = model_or_w.w, model_or_w.b
        C = model_or_w.C if C is None else C
    else:
        w = model_or_w
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(0.5 * w @ w + C * np.maximum(0.0, 1.0 - y * (X @ w + b)).sum())


def svm_train(
    features,
    labels,
    C: float = 1.0,
    seed: int = 0,
    iterations: int = 10_000,
    return_history: bool = False,
):
    """Soft-margin linear SVM by deterministic projected subgradient descent.

    Minimizes ``0.5 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))`` with full-batch
    subgradients, step ``1 / (t + 1)`` (the bias step is scaled by the largest squared
    feature norm, which makes the iteration equivariant to feature rescaling), and
    projection of ``w`` onto the ball that must contain the optimum. The output is
    the best of the t-weighted running averages, so objective values along the
    returned sequence never increase.

    The optimizer consumes no randomness; ``seed`` is recorded for provenance.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("svm_train needs examples of both classes")
    if not C > 0:
        raise ValueError("C must be positive")
    n, d = X.shape
    r2 = float((X * X).sum(axis=1).max())
    r2 = r2 if r2 > 0 else 1.0
    w_max = np.sqrt(2.0 * C * n)  # objective at w=0, b=0 is C*n
    b_max = 1.0 + np.sqrt(r2) * w_max
    yX = y[:, None] * X

    w = np.zeros(d)
    b = 0.0
    avg_w = np.zeros(d)
    avg_b = 0.0
    weight_sum = 0.0
    best_w, best_b = avg_w.copy(), 0.0
    best_obj = C * n
    history = []
    for t in range(1, iterations + 1):
        active = y * (X @ w + b) < 1.0
        gw = w - C * yX[active].sum(axis=0)
        gb = -C * y[active].sum()
        eta = 1.0 / (t + 1)
        w = w - eta * gw
        b = b - eta * r2 * gb
        norm = np.sqrt(w @ w)
        if norm > w_max:
            w *= w_max / norm
        b = min(max(b, -b_max), b_max)
        weight_sum += t
        avg_w += (t / weight_sum) * (w - avg_w)
        avg_b += (t / weight_sum) * (b - avg_b)
        obj = 0.5 * avg_w @ avg_w + C * np.maximum(0.0, 1.0 - y * (X @ avg_w + avg_b)).sum()
        if obj <= best_obj:
            best_obj, best_w, best_b = obj, avg_w.copy(), avg_b
        if return_history:
            history.append(best_obj)
    model = LinearSvm(best_w, float(best_b), float(C), int(seed))
    if return_history:
        return model, np.array(history)
    return model


def svm_score(model: LinearSvm, feature) -> np.ndarray | float:
    """Margin ``w.x + b`` for one vector or each row of a matrix."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {model.dim}")
    out = x @ model.w + model.b
    return float(out) if x.ndim == 1 else out


SVM_MAGIC = b"MTRCSVM\x00"
SVM_VERSION = 1


def save_svm(path, model: LinearSvm) -> None:
    """Magic, u32 version, u32 dim, f64 C, i64 seed, f64 bias, dim x f64 weights (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(SVM_MAGIC)
        fh.write(struct.pack("<IIdqd", SVM_VERSION, model.dim, model.C, model.seed, model.b))
        fh.write(np.ascontiguousarray(model.w, dtype="<f8").tobytes())


def load_svm(path) -> LinearSvm:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SVM_MAGIC:
        raise ValueError(f"{path}: not an SVM model file")
    version, dim, C, seed, b = struct.unpack_from("<IIdqd", blob, 8)
    if version != SVM_VERSION:
        raise ValueError(f"{path}: unsupported SVM version {version}")
    off = 8 + struct.calcsize("<IIdqd")
    if len(blob) != off + 8 * dim:
        raise ValueError(f"{path}: truncated SVM model file")
    w = np.frombuffer(blob, dtype="<f8", count=dim, offset=off).astype(np.float64)
    return LinearSvm(w, b, C, seed)


def train_one_vs_rest(features, classes, n_classes: int, C: float = 1.0, seed: int = 0, iterations: int = 10_000):
    """One SVM per class; classes without both positives and negatives get a None model."""
    X = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes)
    models = []
    for c in range(n_classes):
        y = np.where(classes == c, 1.0, -1.0)
        if (y > 0).any() and (y < 0).any():
            models.append(svm_train(X, y, C=C, seed=seed, iterations=iterations))
        else:
            models.append(None)
    return models


def score_one_vs_rest(models: Sequence[Optional[LinearSvm]], features) -> np.ndarray:
    """``(N, n_classes)`` margins; classes without a model score -inf."""
    X = np.asarray(features, dtype=np.float64)
    out = np.full((len(X), len(models)), -np.inf)
    for c, m in enumerate(models):
        if m is not None:
            out[:, c] = svm_score(m, X) if len(X) else np.zeros(0)
    return out


# ---------------------------------------------------------------------------
# keypoint confidence training sets


def keypoint_correctness(
    image_ids: Sequence[str],
    keypoint_preds,
    gts: Mapping[str, Sequence[Instance]],
    alpha: float = 0.2,
) -> np.ndarray:
    """``(N, K)`` mask: region n's keypoint k lies within ``alpha * H`` of a visible GT keypoint k.

    Each region is judged on its own (no consumption across regions). Instances without
    a torso height never count.
    """
    kp = np.asarray(keypoint_preds, dtype=np.float64)
    n, k = kp.shape[:2]
    correct = np.zeros((n, k), dtype=bool)
    cache = {}
    for img, insts in gts.items():
        rows = [(i, torso_height(i.keypoints)) for i in insts if i.keypoints is not None]
        rows = [(i, h) for i, h in rows if h is not None]
        if rows:
            xy = np.array([[(p.x, p.y) for p in i.keypoints] for i, _ in rows])
            vis = np.array([[p.v for p in i.keypoints] for i, _ in rows], dtype=bool)
            cache[img] = (xy, vis, alpha * np.array([h for _, h in rows]))
    for r, img in enumerate(image_ids):
        entry = cache.get(img)
        if entry is None:
            continue
        xy, vis, radius = entry
        d = np.hypot(xy[:, :, 0] - kp[r, None, :, 0], xy[:, :, 1] - kp[r, None, :, 1])
        correct[r] = (vis & (d < radius[:, None])).any(axis=0)
    return correct


def build_keypoint_svm_sets(image_ids, keypoint_preds, gts, alpha: float = 0.2):
    """Per keypoint type, ``(positive indices, negative indices)`` over the regions."""
    correct = keypoint_correctness(image_ids, keypoint_preds, gts, alpha)
    return [(np.nonzero(correct[:, k])[0], np.nonzero(~correct[:, k])[0]) for k in range(correct.shape[1])]


# ---------------------------------------------------------------------------
# context rescoring


@dataclass
class ContextFeature:
    own_score: float
    others_max: np.ndarray
    object_max: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.own_score], self.others_max, self.object_max])


def build_context_feature(
    region: Box,
    own_score: float,
    other_scores: Sequence,
    object_detections: Sequence[tuple],
    num_actions: int = NUM_ACTIONS,
    num_objects: int = len(CONTEXT_OBJECTS),
) -> ContextFeature:
    """Context vector for one (region, action) score.

    ``other_scores`` holds the per-action score vectors of the other people in the
    image; ``object_detections`` holds ``(box, object class, score)`` triples. Missing
    context is filled with 0.
    """
    others = np.zeros(num_actions)
    if len(other_scores):
        others = np.max(np.asarray(other_scores, dtype=np.float64).reshape(-1, num_actions), axis=0)
    objects = np.zeros(num_objects)
    if len(object_detections):
        boxes = boxes_to_array([d[0] for d in object_detections])
        ov = iou_matrix(region.as_array()[None], boxes)[0]
        for (_, cls, score), o in zip(object_detections, ov):
            if o > CONTEXT_IOU:
                objects[cls] = max(objects[cls], score)
    return ContextFeature(float(own_score), others, objects)


def context_tensor(
    regions: Sequence[Box],
    image_ids: Sequence[str],
    scores,
    object_detections: Mapping[str, Sequence[tuple]],
    num_objects: int = len(CONTEXT_OBJECTS),
) -> np.ndarray:
    """``(N, A, 1 + A + O)`` context vectors for every region and action.

    The "other instances" of a region are the remaining regions from the same image.
    Unscored actions (-inf) count as missing context for the other regions.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, a = scores.shape
    finite = np.where(np.isfinite(scores), scores, 0.0)
    out = np.zeros((n, a, 1 + a + num_objects))
    by_img = {}
    for i, img in enumerate(image_ids):
        by_img.setdefault(img, []).append(i)
    for img, idx in by_img.items():
        dets = object_detections.get(img, ())
        for i in idx:
            others = [finite[j] for j in idx if j != i]
            base = build_context_feature(regions[i], 0.0, others, dets, a, num_objects)
            vec = base.as_vector()
            out[i, :, :] = vec
            out[i, :, 0] = scores[i]
    return out


def train_context_rescorer(contexts, true_actions, C: float = 1.0, seed: int = 0, iterations: int = 10_000):
    """One SVM per action over that action's context vectors (+1 iff the true action matches)."""
    contexts = np.asarray(contexts, dtype=np.float64)
    true_actions = np.asarray(true_actions)
    models = []
    for a in range(contexts.shape[1]):
        y = np.where(true_actions == a, 1.0, -1.0)
        if (y > 0).any() and (y < 0).any():
            models.append(svm_train(contexts[:, a, :], y, C=C, seed=seed, iterations=iterations))
        else:
            models.append(None)
    return models


def rescore_actions(contexts, models: Sequence[Optional[LinearSvm]]) -> np.ndarray:
    """Replace each (region, action) score with that action's SVM margin on its context vector.

    Actions without a model keep their original score.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    out = contexts[:, :, 0].copy()
    for a, m in enumerate(models):
        if m is not None:
            out[:, a] = svm_score(m, contexts[:, a, :]) if len(contexts) else np.zeros(0)
    return out
