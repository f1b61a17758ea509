"""End-to-end glue: region sets from scenes, preset training, and the four evaluation protocols."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .evaluation import (
    APResult,
    ScoredPrediction,
    evaluate_action_classification,
    evaluate_action_detection,
    evaluate_apk,
    evaluate_detection,
    non_max_suppression,
    nms_predictions,
)
from .geometry import NUM_KEYPOINTS, Box
from .labeling import NUM_ACTIONS, DetLabel, build_samples, jitter_augment
from .losses import HeadOutputs, TaskWeights
from .network import ConvSpec, NetworkConfig, RegionDataset, TrainConfig, TrainResult, predict, train
from .rescore import (
    LinearSvm,
    context_tensor,
    keypoint_correctness,
    rescore_actions,
    score_one_vs_rest,
    svm_train,
    train_context_rescorer,
)
from .synthdata import RegionCrops, Scene, simulate_object_detections

log = logging.getLogger(__name__)

PRESETS = {
    "pose": TaskWeights(0.0, 1.0, 0.0),
    "action": TaskWeights(0.0, 0.0, 1.0),
    "detection": TaskWeights(1.0, 0.0, 0.0),
    "detection-action": TaskWeights(1.0, 0.0, 1.0),
    "detection-pose-action": TaskWeights(1.0, 1.0, 2.0),
}

DEFAULT_JITTER = 20


def default_network_config() -> NetworkConfig:
    """Wider than the bare ``NetworkConfig`` default; the pose head needs the capacity."""
    return NetworkConfig(conv=(ConvSpec(16), ConvSpec(32), ConvSpec(64)), fc_widths=(256, 256))


# region sources
PROPOSAL, JITTER, GROUND_TRUTH = 0, 1, 2


@dataclass
class RegionSet:
    """Region tensors and labels drawn from a list of scenes."""

    inputs: np.ndarray  # (N, C, h, w) float32
    samples: list
    image_ids: list
    boxes: np.ndarray  # (N, 4)
    source: np.ndarray  # PROPOSAL / JITTER / GROUND_TRUTH
    scene_pos: np.ndarray  # position of the region's scene in the scene list

    def __len__(self):
        return len(self.samples)

    def subset(self, idx) -> "RegionSet":
        idx = np.asarray(idx, dtype=np.int64)
        return RegionSet(
            self.inputs[idx],
            [self.samples[i] for i in idx],
            [self.image_ids[i] for i in idx],
            self.boxes[idx],
            self.source[idx],
            self.scene_pos[idx],
        )

    def dataset(self) -> RegionDataset:
        return RegionDataset(self.inputs, self.samples)


def build_region_set(
    scenes: Sequence[Scene],
    proposals: bool = True,
    jitter: int = 0,
    jitter_seed: int = 0,
    ground_truth: bool = False,
    size=(24, 24),
    jitter_for_detection: bool = True,
) -> RegionSet:
    """Crop and label regions: scene proposals, ``jitter`` boxes per person, and/or GT boxes.

    With ``jitter_for_detection`` off, jittered regions supervise only the pose and
    action heads (their detection label is set to ignore).
    """
    boxes, samples, ids, src, pos = [], [], [], [], []

    def add(scene_pos, scene, region_boxes, kind):
        for s in build_samples(region_boxes, scene.instances):
            if kind == JITTER and not jitter_for_detection:
                s = replace(s, det_label=DetLabel.IGNORE)
            boxes.append(s.region.as_array())
            samples.append(s)
            ids.append(scene.scene_id)
            src.append(kind)
            pos.append(scene_pos)

    for p, sc in enumerate(scenes):
        if proposals:
            add(p, sc, sc.proposals, PROPOSAL)
        if jitter:
            for i, inst in enumerate(sc.instances):
                add(p, sc, jitter_augment(inst, jitter, rng_seed=[jitter_seed, sc.index, i]), JITTER)
        if ground_truth:
            add(p, sc, [inst.box for inst in sc.instances], GROUND_TRUTH)
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    pos = np.array(pos, dtype=np.int64)
    canvases = np.stack([sc.canvas for sc in scenes]) if scenes else np.zeros((0, 1, 1, 3), np.float32)
    inputs = RegionCrops(canvases, pos, boxes, size).materialize()
    return RegionSet(inputs, samples, ids, boxes, np.array(src, dtype=np.int8), pos)


def ground_truth_table(scenes: Sequence[Scene]) -> dict:
    return {sc.scene_id: list(sc.instances) for sc in scenes}


# ---------------------------------------------------------------------------
# training


def default_train_config(preset: str, **overrides) -> TrainConfig:
    """Training defaults per preset; single-head pose/action runs sample positives only."""
    w = PRESETS[preset]
    fraction = 0.25 if w.lambda_D > 0 else None
    cfg = TrainConfig(weights=w, positive_fraction=fraction, learning_rate=0.01, iterations=12000, lr_decay_every=8000)
    return replace(cfg, **overrides)


def trainable_indices(region_set: RegionSet, w: TaskWeights) -> np.ndarray:
    """Regions that give a non-zero loss term for at least one weighted head."""
    keep = np.zeros(len(region_set), dtype=bool)
    for i, s in enumerate(region_set.samples):
        keep[i] = (
            (w.lambda_D > 0 and s.det_label != DetLabel.IGNORE)
            or (w.lambda_P > 0 and s.pose_active)
            or (w.lambda_A > 0 and s.action_active)
        )
    return np.nonzero(keep)[0]


def train_on_regions(
    region_set: RegionSet,
    cfg: TrainConfig,
    net_config: Optional[NetworkConfig] = None,
    params: Optional[dict] = None,
    log_every: int = 0,
) -> TrainResult:
    net_config = net_config or default_network_config()
    idx = trainable_indices(region_set, cfg.weights)
    if len(idx) == 0:
        raise ValueError("no region carries a label for the weighted heads")
    data = RegionDataset(region_set.inputs[idx], [region_set.samples[i] for i in idx])
    return train(data, net_config, cfg, params=params, log_every=log_every)


# ---------------------------------------------------------------------------
# SVM helpers


def _subsample(idx, cap, rng):
    idx = np.asarray(idx)
    if cap is None or len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


@dataclass(frozen=True)
class SvmConfig:
    """Settings for the feature SVMs. ``C`` is divided by the training-set size."""

    C: float = 10.0
    iterations: int = 1500
    max_samples: int = 3000
    seed: int = 0


# keypoint confidence SVMs want a much weaker regularizer and fc6 features
KEYPOINT_SVM = SvmConfig(C=300.0, iterations=2000)
KEYPOINT_FEATURE = "fc6"


def fit_svm(features, labels, cfg: SvmConfig) -> Optional[LinearSvm]:
    labels = np.asarray(labels, dtype=np.float64)
    if not ((labels > 0).any() and (labels < 0).any()):
        return None
    rng = np.random.default_rng(cfg.seed)
    pos = _subsample(np.nonzero(labels > 0)[0], cfg.max_samples // 2, rng)
    neg = _subsample(np.nonzero(labels < 0)[0], cfg.max_samples - len(pos), rng)
    idx = np.concatenate([pos, neg])
    X = np.asarray(features, dtype=np.float64)[idx]
    return svm_train(X, labels[idx], C=cfg.C / len(idx), seed=cfg.seed, iterations=cfg.iterations)


# ---------------------------------------------------------------------------
# keypoints


def region_keypoints(outputs: HeadOutputs, boxes) -> np.ndarray:
    """``(N, K, 2)`` image coordinates from the pose head's normalized outputs."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    xy = np.asarray(outputs.pose_coords, dtype=np.float64).reshape(len(boxes), -1, 2)
    w = (boxes[:, 2] - boxes[:, 0])[:, None]
    h = (boxes[:, 3] - boxes[:, 1])[:, None]
    cx = (0.5 * (boxes[:, 0] + boxes[:, 2]))[:, None]
    cy = (0.5 * (boxes[:, 1] + boxes[:, 3]))[:, None]
    return np.stack([xy[:, :, 0] * w + cx, xy[:, :, 1] * h + cy], axis=-1)


def train_keypoint_svms(outputs, region_set: RegionSet, gts, cfg: SvmConfig = KEYPOINT_SVM, feature: str = KEYPOINT_FEATURE, alpha: float = 0.2):
    """One confidence SVM per keypoint type, trained on whether the regressed keypoint lands."""
    kp = region_keypoints(outputs, region_set.boxes)
    correct = keypoint_correctness(region_set.image_ids, kp, gts, alpha)
    X = outputs.features[feature]
    return [fit_svm(X, np.where(correct[:, k], 1.0, -1.0), replace(cfg, seed=cfg.seed + k)) for k in range(NUM_KEYPOINTS)]


def keypoint_predictions(outputs, region_set: RegionSet, models, feature: str = KEYPOINT_FEATURE, nms_threshold: Optional[float] = 0.3) -> list:
    """Scored keypoint predictions, one per (region, keypoint type), after per-type box NMS."""
    kp = region_keypoints(outputs, region_set.boxes)
    scores = score_one_vs_rest(models, outputs.features[feature])
    by_img = {}
    for i, img in enumerate(region_set.image_ids):
        by_img.setdefault(img, []).append(i)
    preds = []
    for img, idx in by_img.items():
        idx = np.array(idx)
        for k in range(NUM_KEYPOINTS):
            s = scores[idx, k]
            keep = np.arange(len(idx)) if nms_threshold is None else np.sort(
                non_max_suppression(region_set.boxes[idx], s, nms_threshold)
            )
            for j in keep:
                r = idx[j]
                preds.append(ScoredPrediction(img, float(s[j]), k, keypoint=(float(kp[r, k, 0]), float(kp[r, k, 1]))))
    return preds


# ---------------------------------------------------------------------------
# detection and actions


def detection_predictions(outputs, region_set: RegionSet, nms_threshold: Optional[float] = 0.3) -> list:
    preds = [
        ScoredPrediction(img, float(p), 0, box=Box(*b))
        for img, p, b in zip(region_set.image_ids, outputs.det_probs[:, 1], region_set.boxes)
    ]
    return preds if nms_threshold is None else nms_predictions(preds, nms_threshold)


def detection_predictions_from_scores(scores, region_set: RegionSet, nms_threshold: Optional[float] = 0.3) -> list:
    preds = [
        ScoredPrediction(img, float(s), 0, box=Box(*b))
        for img, s, b in zip(region_set.image_ids, np.asarray(scores, dtype=np.float64), region_set.boxes)
    ]
    return preds if nms_threshold is None else nms_predictions(preds, nms_threshold)


def train_detection_svm(outputs, region_set: RegionSet, cfg: SvmConfig = SvmConfig(), feature: str = "fc7"):
    """Person-vs-background SVM; ignore-band regions are left out."""
    labels = np.array([{DetLabel.POSITIVE: 1.0, DetLabel.NEGATIVE: -1.0}.get(s.det_label, 0.0) for s in region_set.samples])
    use = np.nonzero(labels != 0)[0]
    return fit_svm(outputs.features[feature][use], labels[use], cfg)


def detection_svm_scores(model, outputs, feature: str = "fc7") -> np.ndarray:
    if model is None:
        return np.zeros(len(outputs))
    return score_one_vs_rest([model], outputs.features[feature])[:, 0]


def action_detection_predictions(scores, region_set: RegionSet, nms_threshold: Optional[float] = 0.3) -> list:
    """One prediction per (region, action) with the given ``(N, A)`` scores, NMS per action."""
    scores = np.asarray(scores, dtype=np.float64)
    preds = []
    for i, (img, b) in enumerate(zip(region_set.image_ids, region_set.boxes)):
        box = Box(*b)
        for a in range(scores.shape[1]):
            preds.append(ScoredPrediction(img, float(scores[i, a]), a, box=box))
    return preds if nms_threshold is None else nms_predictions(preds, nms_threshold)


def product_scores(outputs: HeadOutputs, mode: str = "product") -> np.ndarray:
    if mode == "product":
        return outputs.det_probs[:, 1:2] * outputs.action_probs
    if mode == "action":
        return outputs.action_probs.copy()
    raise ValueError(f"unknown scoring mode {mode!r}")


def train_action_svms(
    outputs,
    region_set: RegionSet,
    cfg: SvmConfig = SvmConfig(),
    feature: str = "fc6",
    background: bool = True,
):
    """Per-action SVMs on network features.

    Positives are regions labeled with the action; negatives are regions labeled with
    another action plus, when ``background`` is set, detection-negative regions.
    """
    labels = np.array([s.action_label if s.action_label is not None else -1 for s in region_set.samples])
    negative_bg = np.array([s.det_label == DetLabel.NEGATIVE for s in region_set.samples])
    X = outputs.features[feature]
    models = []
    for a in range(NUM_ACTIONS):
        y = np.zeros(len(labels))
        y[labels == a] = 1.0
        y[(labels >= 0) & (labels != a)] = -1.0
        if background:
            y[negative_bg] = -1.0
        use = np.nonzero(y != 0)[0]
        models.append(fit_svm(X[use], y[use], replace(cfg, seed=cfg.seed + a)))
    return models


def evaluate_predictions(task: str, preds, scenes: Sequence[Scene], **kw) -> APResult:
    gts = ground_truth_table(scenes)
    if task == "det":
        return evaluate_detection(preds, {k: [i.box for i in v] for k, v in gts.items()}, **kw)
    if task == "apk":
        return evaluate_apk(preds, gts, **kw)
    if task == "action-det":
        return evaluate_action_detection(preds, gts, **kw)
    raise ValueError(f"unknown task {task!r}")


def action_classification_scores(outputs, models=None, feature: str = "fc6") -> np.ndarray:
    """Softmax action probabilities, or SVM margins when models are given."""
    if models is None:
        return outputs.action_probs.copy()
    return score_one_vs_rest(models, outputs.features[feature])


def true_actions(region_set: RegionSet, scenes: Sequence[Scene]) -> np.ndarray:
    """Action of the GT instance behind each ground-truth region."""
    out = []
    for s, p in zip(region_set.samples, region_set.scene_pos):
        out.append(scenes[p].instances[s.matched_instance].action)
    return np.array(out)


# ---------------------------------------------------------------------------
# context


def object_detection_table(scenes: Sequence[Scene], seed: int = 0) -> dict:
    return {sc.scene_id: simulate_object_detections(sc, seed=seed) for sc in scenes}


def context_features(scores, region_set: RegionSet, object_dets: Mapping[str, Sequence[tuple]]) -> np.ndarray:
    regions = [Box(*b) for b in region_set.boxes]
    return context_tensor(regions, region_set.image_ids, scores, object_dets)


def fit_context_rescorer(contexts, actions, cfg: SvmConfig = SvmConfig()):
    contexts = np.asarray(contexts)
    n = len(contexts)
    return train_context_rescorer(contexts, actions, C=cfg.C / max(n, 1), seed=cfg.seed, iterations=cfg.iterations)


def apply_context_rescorer(contexts, models) -> np.ndarray:
    return rescore_actions(contexts, models)


def run_predict(result_params, net_config, region_set: RegionSet) -> HeadOutputs:
    return predict(result_params, net_config, region_set.inputs)


def action_classification(true, scores) -> APResult:
    return evaluate_action_classification(true, scores)
