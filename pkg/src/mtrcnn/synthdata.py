"""Deterministic synthetic scenes: stick-figure people doing one of ten actions.

Each scene is a small 3-channel canvas. Right limbs and the head are drawn into
channel 0, left limbs into channel 1 (the torso into both), context objects into
channel 2, plus random clutter strokes and pixel noise. Actions differ by pose
template and by which object tends to appear next to the person.

Region inputs are bilinear crops of the canvas resampled to a fixed size.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import KEYPOINT_NAMES, NUM_KEYPOINTS, Box, Keypoint, boxes_to_array, iou, iou_matrix
from .labeling import ACTIONS, NUM_ACTIONS, Instance
from .rescore import CONTEXT_OBJECTS

A = {name: i for i, name in enumerate(ACTIONS)}
OBJ = {name: i for i, name in enumerate(CONTEXT_OBJECTS)}

# Standing pose in box-relative coordinates (u to the right, v down), one row per keypoint.
STANDING = np.array(
    [
        (0.50, 0.08),  # Nose
        (0.30, 0.22),  # R_Shoulder
        (0.22, 0.38),  # R_Elbow
        (0.18, 0.53),  # R_Wrist
        (0.70, 0.22),  # L_Shoulder
        (0.78, 0.38),  # L_Elbow
        (0.82, 0.53),  # L_Wrist
        (0.37, 0.58),  # R_Hip
        (0.35, 0.77),  # R_Knee
        (0.34, 0.95),  # R_Ankle
        (0.63, 0.58),  # L_Hip
        (0.65, 0.77),  # L_Knee
        (0.66, 0.95),  # L_Ankle
    ]
)


def _pose(**moves):
    p = STANDING.copy()
    for name, uv in moves.items():
        p[KEYPOINT_NAMES.index(name)] = uv
    return p


POSE_TEMPLATES = {
    "jumping": _pose(
        R_Elbow=(0.15, 0.10), R_Wrist=(0.12, 0.02), L_Elbow=(0.85, 0.10), L_Wrist=(0.88, 0.02),
        R_Knee=(0.18, 0.72), R_Ankle=(0.30, 0.88), L_Knee=(0.82, 0.72), L_Ankle=(0.70, 0.88),
    ),
    "phoning": _pose(R_Elbow=(0.12, 0.28), R_Wrist=(0.38, 0.10)),
    "playinginstrument": _pose(
        R_Elbow=(0.25, 0.42), R_Wrist=(0.50, 0.36), L_Elbow=(0.80, 0.30), L_Wrist=(0.95, 0.22),
    ),
    "reading": _pose(
        R_Elbow=(0.20, 0.45), R_Wrist=(0.42, 0.38), L_Elbow=(0.80, 0.45), L_Wrist=(0.58, 0.38),
    ),
    "ridingbike": _pose(
        R_Elbow=(0.20, 0.35), R_Wrist=(0.08, 0.42), L_Elbow=(0.80, 0.35), L_Wrist=(0.92, 0.42),
        R_Knee=(0.22, 0.66), R_Ankle=(0.30, 0.84), L_Knee=(0.78, 0.66), L_Ankle=(0.70, 0.84),
    ),
    "ridinghorse": _pose(
        R_Wrist=(0.42, 0.50), L_Wrist=(0.58, 0.50), R_Elbow=(0.25, 0.42), L_Elbow=(0.75, 0.42),
        R_Knee=(0.10, 0.72), R_Ankle=(0.14, 0.92), L_Knee=(0.90, 0.72), L_Ankle=(0.86, 0.92),
    ),
    "running": _pose(
        R_Elbow=(0.15, 0.30), R_Wrist=(0.30, 0.18), L_Elbow=(0.88, 0.42), L_Wrist=(0.92, 0.60),
        R_Knee=(0.15, 0.70), R_Ankle=(0.05, 0.86), L_Knee=(0.70, 0.80), L_Ankle=(0.95, 0.92),
    ),
    "takingphoto": _pose(
        R_Elbow=(0.10, 0.22), R_Wrist=(0.36, 0.12), L_Elbow=(0.90, 0.22), L_Wrist=(0.64, 0.12),
    ),
    "usingcomputer": _pose(
        R_Elbow=(0.28, 0.48), R_Wrist=(0.48, 0.60), L_Elbow=(0.90, 0.40), L_Wrist=(0.95, 0.55),
        R_Knee=(0.22, 0.70), L_Knee=(0.78, 0.70),
    ),
    "walking": _pose(
        R_Wrist=(0.28, 0.52), L_Wrist=(0.86, 0.48),
        R_Knee=(0.30, 0.76), R_Ankle=(0.20, 0.95), L_Knee=(0.68, 0.77), L_Ankle=(0.80, 0.95),
    ),
}

# (keypoint a, keypoint b, channel) limb segments; channel -1 = both body channels
LIMBS = (
    ("R_Shoulder", "R_Elbow", 0), ("R_Elbow", "R_Wrist", 0),
    ("R_Hip", "R_Knee", 0), ("R_Knee", "R_Ankle", 0),
    ("L_Shoulder", "L_Elbow", 1), ("L_Elbow", "L_Wrist", 1),
    ("L_Hip", "L_Knee", 1), ("L_Knee", "L_Ankle", 1),
    ("R_Shoulder", "L_Shoulder", -1), ("R_Hip", "L_Hip", -1),
    ("R_Shoulder", "R_Hip", -1), ("L_Shoulder", "L_Hip", -1),
)

DEFAULT_COOCCURRENCE = {
    "ridinghorse": {"horse": 0.9},
    "ridingbike": {"bike": 0.9},
    "usingcomputer": {"tvmonitor": 0.9},
}


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple = (96, 96)  # (height, width)
    persons_p: tuple = (0.4, 0.4, 0.2)  # P(1 person), P(2), P(3)
    person_height: tuple = (34.0, 56.0)
    aspect: tuple = (0.45, 0.55)  # width / height
    action_weights: tuple = (1.0,) * NUM_ACTIONS
    cooccurrence: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_COOCCURRENCE.items()})
    distractor_object_p: float = 0.3
    pose_cue: float = 1.0
    pose_noise: float = 0.015
    occlusion_rate: float = 0.05
    pixel_noise: float = 0.05
    clutter: int = 4
    render_objects: bool = True
    max_person_overlap: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        for name in ("persons_p", "person_height", "aspect", "action_weights"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.action_weights) != NUM_ACTIONS:
            raise ValueError(f"action_weights needs {NUM_ACTIONS} entries")
        if min(self.action_weights) < 0 or sum(self.action_weights) <= 0:
            raise ValueError("action_weights must be non-negative with a positive sum")
        if not math.isclose(sum(self.persons_p), 1.0, abs_tol=1e-9) or min(self.persons_p) < 0:
            raise ValueError("persons_p must be a probability vector")
        for p in (self.distractor_object_p, self.occlusion_rate):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        for action, table in self.cooccurrence.items():
            if action not in A:
                raise ValueError(f"unknown action {action!r} in cooccurrence")
            for obj, p in table.items():
                if obj not in OBJ:
                    raise ValueError(f"unknown object class {obj!r}")
                if not 0 <= p <= 1:
                    raise ValueError("co-occurrence probabilities must lie in [0, 1]")
        if self.person_height[1] > min(self.canvas):
            raise ValueError("people do not fit on the canvas")

    @property
    def action_probs(self) -> np.ndarray:
        w = np.array(self.action_weights)
        return w / w.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class Scene:
    scene_id: str
    canvas: np.ndarray  # (H, W, 3) float32
    instances: list
    objects: list  # (Box, object class index)
    proposals: list = field(default_factory=list)
    index: int = 0


# ---------------------------------------------------------------------------
# rendering


def _grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _stroke(layer, xs, ys, p, q, radius, value=1.0):
    """Anti-aliased thick segment from p to q (max-composited)."""
    px, py = p
    dx, dy = q[0] - px, q[1] - py
    L2 = dx * dx + dy * dy
    x0, x1 = int(max(0, min(px, q[0]) - radius - 2)), int(min(layer.shape[1], max(px, q[0]) + radius + 3))
    y0, y1 = int(max(0, min(py, q[1]) - radius - 2)), int(min(layer.shape[0], max(py, q[1]) + radius + 3))
    if x0 >= x1 or y0 >= y1:
        return
    gx, gy = xs[y0:y1, x0:x1], ys[y0:y1, x0:x1]
    if L2 > 0:
        t = np.clip(((gx - px) * dx + (gy - py) * dy) / L2, 0.0, 1.0)
    else:
        t = 0.0
    d = np.hypot(gx - (px + t * dx), gy - (py + t * dy))
    ink = np.clip(radius + 0.5 - d, 0.0, 1.0) * value
    np.maximum(layer[y0:y1, x0:x1], ink, out=layer[y0:y1, x0:x1])


def _disc(layer, xs, ys, c, radius, value=1.0, ring=False):
    x0, x1 = int(max(0, c[0] - radius - 2)), int(min(layer.shape[1], c[0] + radius + 3))
    y0, y1 = int(max(0, c[1] - radius - 2)), int(min(layer.shape[0], c[1] + radius + 3))
    if x0 >= x1 or y0 >= y1:
        return
    d = np.hypot(xs[y0:y1, x0:x1] - c[0], ys[y0:y1, x0:x1] - c[1])
    if ring:
        ink = np.clip(1.0 - np.abs(d - radius), 0.0, 1.0) * value
    else:
        ink = np.clip(radius + 0.5 - d, 0.0, 1.0) * value
    np.maximum(layer[y0:y1, x0:x1], ink, out=layer[y0:y1, x0:x1])


def _rect(layer, xs, ys, box, value=1.0, outline=False):
    inside = (xs >= box.x_min) & (xs < box.x_max) & (ys >= box.y_min) & (ys < box.y_max)
    if outline:
        inner = (xs >= box.x_min + 1.5) & (xs < box.x_max - 1.5) & (ys >= box.y_min + 1.5) & (ys < box.y_max - 1.5)
        inside &= ~inner
    layer[inside] = np.maximum(layer[inside], value)


def _draw_person(canvas, xs, ys, inst: Instance, joint_xy: np.ndarray):
    h = inst.box.height
    r = max(1.0, 0.028 * h)
    kp = {name: joint_xy[i] for i, name in enumerate(KEYPOINT_NAMES)}
    for a, b, ch in LIMBS:
        layers = (0, 1) if ch < 0 else (ch,)
        for c in layers:
            _stroke(canvas[:, :, c], xs, ys, kp[a], kp[b], r, 0.8 if ch < 0 else 1.0)
    neck = 0.5 * (kp["R_Shoulder"] + kp["L_Shoulder"])
    _stroke(canvas[:, :, 0], xs, ys, neck, kp["Nose"], r, 0.8)
    _disc(canvas[:, :, 0], xs, ys, kp["Nose"], 0.07 * h, 1.0)
    # visible joints get a bright dot in both body channels
    for i, k in enumerate(inst.keypoints):
        if k.v and i != 0:
            _disc(canvas[:, :, 0], xs, ys, joint_xy[i], 1.3 * r, 1.0)
            _disc(canvas[:, :, 1], xs, ys, joint_xy[i], 1.3 * r, 1.0)


def _draw_object(layer, xs, ys, box: Box, cls: int):
    name = CONTEXT_OBJECTS[cls]
    w, h = box.width, box.height
    x0, y0 = box.x_min, box.y_min
    if name == "horse":
        body = Box(x0 + 0.15 * w, y0 + 0.15 * h, x0 + 0.85 * w, y0 + 0.55 * h)
        _rect(layer, xs, ys, body, 0.9)
        for fx in (0.2, 0.35, 0.65, 0.8):
            _stroke(layer, xs, ys, (x0 + fx * w, y0 + 0.5 * h), (x0 + fx * w, y0 + 0.98 * h), 0.9, 0.9)
        _stroke(layer, xs, ys, (x0 + 0.85 * w, y0 + 0.3 * h), (x0 + 0.98 * w, y0 + 0.02 * h), 1.5, 0.9)
    elif name == "bike":
        rad = 0.3 * min(w, h)
        _disc(layer, xs, ys, (x0 + 0.25 * w, y0 + 0.65 * h), rad, 1.0, ring=True)
        _disc(layer, xs, ys, (x0 + 0.75 * w, y0 + 0.65 * h), rad, 1.0, ring=True)
        _stroke(layer, xs, ys, (x0 + 0.25 * w, y0 + 0.65 * h), (x0 + 0.5 * w, y0 + 0.25 * h), 0.7, 1.0)
        _stroke(layer, xs, ys, (x0 + 0.5 * w, y0 + 0.25 * h), (x0 + 0.75 * w, y0 + 0.65 * h), 0.7, 1.0)
    elif name == "motorcycle":
        rad = 0.25 * min(w, h)
        _disc(layer, xs, ys, (x0 + 0.22 * w, y0 + 0.7 * h), rad, 1.0)
        _disc(layer, xs, ys, (x0 + 0.78 * w, y0 + 0.7 * h), rad, 1.0)
        _rect(layer, xs, ys, Box(x0 + 0.2 * w, y0 + 0.2 * h, x0 + 0.8 * w, y0 + 0.55 * h), 0.7)
    else:  # tvmonitor
        _rect(layer, xs, ys, Box(x0 + 0.05 * w, y0, x0 + 0.95 * w, y0 + 0.75 * h), 1.0, outline=True)
        _stroke(layer, xs, ys, (x0 + 0.5 * w, y0 + 0.75 * h), (x0 + 0.5 * w, y0 + 0.98 * h), 1.0, 1.0)


def _object_box_near(person: Box, cls: int) -> Box:
    h = person.height
    cx = 0.5 * (person.x_min + person.x_max)
    name = CONTEXT_OBJECTS[cls]
    if name == "horse":
        return Box.from_center(cx, person.y_min + 0.8 * h, 0.8 * h, 0.55 * h)
    if name == "bike":
        return Box.from_center(cx, person.y_min + 0.82 * h, 0.9 * h, 0.4 * h)
    if name == "motorcycle":
        return Box.from_center(cx, person.y_min + 0.8 * h, 1.0 * h, 0.45 * h)
    return Box.from_center(cx + 0.25 * h, person.y_min + 0.55 * h, 0.5 * h, 0.4 * h)


def _clip_box(box: Box, shape) -> Optional[Box]:
    hgt, wid = shape
    x0, y0 = max(0.0, box.x_min), max(0.0, box.y_min)
    x1, y1 = min(float(wid), box.x_max), min(float(hgt), box.y_max)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return Box(x0, y0, x1, y1)


def scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    rng = scene_rng(spec.seed, index)
    hgt, wid = spec.canvas
    xs, ys = _grid(spec.canvas)
    canvas = np.zeros((hgt, wid, 3), dtype=np.float64)

    n_people = int(rng.choice(len(spec.persons_p), p=spec.persons_p)) + 1
    boxes: list = []
    for _ in range(n_people):
        for attempt in range(200):
            ph = rng.uniform(*spec.person_height)
            pw = ph * rng.uniform(*spec.aspect)
            x0 = rng.uniform(1.0, wid - pw - 1.0)
            y0 = rng.uniform(1.0, hgt - ph - 1.0)
            cand = Box(x0, y0, x0 + pw, y0 + ph)
            if all(iou(cand, b) <= spec.max_person_overlap for b in boxes) or attempt == 199:
                boxes.append(cand)
                break

    instances, objects = [], []
    actions = rng.choice(NUM_ACTIONS, size=n_people, p=spec.action_probs)
    for box, act in zip(boxes, actions):
        act = int(act)
        template = STANDING + spec.pose_cue * (POSE_TEMPLATES[ACTIONS[act]] - STANDING)
        uv = template + rng.normal(0.0, spec.pose_noise, size=template.shape)
        xy = np.column_stack([box.x_min + uv[:, 0] * box.width, box.y_min + uv[:, 1] * box.height])
        vis = rng.random(NUM_KEYPOINTS) >= spec.occlusion_rate
        kps = tuple(Keypoint(float(x), float(y), bool(v)) for (x, y), v in zip(xy, vis))
        inst = Instance(box, kps, act)
        instances.append(inst)
        for obj_name, p in spec.cooccurrence.get(ACTIONS[act], {}).items():
            if rng.random() < p:
                ob = _clip_box(_object_box_near(box, OBJ[obj_name]), spec.canvas)
                if ob is not None:
                    objects.append((ob, OBJ[obj_name]))
    if rng.random() < spec.distractor_object_p:
        cls = int(rng.integers(len(CONTEXT_OBJECTS)))
        size = rng.uniform(*spec.person_height)
        ob = _clip_box(
            Box.from_center(rng.uniform(0, wid), rng.uniform(0, hgt), size * rng.uniform(0.5, 1.0), size * rng.uniform(0.3, 0.6)),
            spec.canvas,
        )
        if ob is not None:
            objects.append((ob, cls))

    # clutter strokes in random channels, under everything else
    for _ in range(spec.clutter):
        ch = int(rng.integers(3))
        p = rng.uniform(0, [wid, hgt])
        q = p + rng.normal(0, 0.25 * min(hgt, wid), size=2)
        _stroke(canvas[:, :, ch], xs, ys, p, q, rng.uniform(0.6, 1.5), rng.uniform(0.3, 0.8))
    if spec.render_objects:
        for ob, cls in objects:
            _draw_object(canvas[:, :, 2], xs, ys, ob, cls)
    for inst in instances:
        xy = np.array([(k.x, k.y) for k in inst.keypoints])
        _draw_person(canvas, xs, ys, inst, xy)
    canvas += rng.normal(0.0, spec.pixel_noise, size=canvas.shape)
    return Scene(f"{spec.seed:d}-{index:06d}", canvas.astype(np.float32), instances, objects, index=index)


# ---------------------------------------------------------------------------
# proposals

IOU_BANDS = ((0.0, 0.3), (0.3, 0.5), (0.5, 0.7), (0.7, 1.0))


def _in_band(o, band_index):
    lo, hi = IOU_BANDS[band_index]
    if band_index == 0:
        return o < 0.3
    if band_index == 1:
        return 0.3 <= o <= 0.5
    if band_index == 2:
        return 0.5 < o <= 0.7
    return o > 0.7


def generate_proposals(scene: Scene, n_per_instance: int = 16, n_background: int = 16, seed: int = 0) -> list:
    """Stand-in region proposals: per-person boxes stratified over IoU bands plus background boxes.

    Per person, ``n_per_instance`` boxes are split evenly over the IoU bands
    ``<0.3, [0.3, 0.5], (0.5, 0.7], >0.7`` (remainder to the top band). Background
    boxes overlap every person by less than 0.3.
    """
    if n_per_instance < 0 or n_background < 0:
        raise ValueError("proposal counts must be non-negative")
    rng = scene_rng(seed, scene.index, stream=1)
    shape = scene.canvas.shape[:2]
    hgt, wid = shape
    out: list = []
    spreads = (0.9, 0.45, 0.3, 0.15)  # per-band perturbation scale
    for inst in scene.instances:
        quota = [n_per_instance // 4] * 4
        quota[3] += n_per_instance - sum(quota)
        b = inst.box
        cx, cy = b.center
        for band, need in enumerate(quota):
            got = 0
            s = spreads[band]
            for _ in range(20_000):
                if got == need:
                    break
                u = rng.uniform(-1.0, 1.0, size=4)
                cand = Box.from_center(
                    cx + u[0] * s * b.width,
                    cy + u[1] * s * b.height,
                    b.width * math.exp(u[2] * s),
                    b.height * math.exp(u[3] * s),
                )
                cand = _clip_box(cand, shape)
                if cand is None:
                    continue
                o = iou(cand, b)
                if band == 0 and o == 0.0:
                    continue
                if _in_band(o, band):
                    out.append(cand)
                    got += 1
    gt = np.array([i.box.as_array() for i in scene.instances]).reshape(-1, 4)
    lo_h, hi_h = 0.6 * min(hgt, wid) * 0.35, 0.6 * min(hgt, wid)
    got = 0
    for _ in range(20_000):
        if got == n_background:
            break
        bh = rng.uniform(lo_h, hi_h)
        bw = bh * rng.uniform(0.4, 1.0)
        x0 = rng.uniform(0, wid - bw)
        y0 = rng.uniform(0, hgt - bh)
        cand = Box(x0, y0, x0 + bw, y0 + bh)
        if len(gt) and iou_matrix(cand.as_array()[None], gt).max() >= 0.3:
            continue
        out.append(cand)
        got += 1
    return out


def generate_dataset(
    spec: SceneSpec,
    n_scenes: int,
    n_per_instance: int = 16,
    n_background: int = 16,
    start: int = 0,
) -> list:
    """``n_scenes`` scenes with proposals, scene ``i`` seeded from ``(spec.seed, start + i)``."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    scenes = []
    for i in range(start, start + n_scenes):
        sc = generate_scene(spec, i)
        sc.proposals = generate_proposals(sc, n_per_instance, n_background, seed=spec.seed)
        scenes.append(sc)
    return scenes


def simulate_object_detections(scene: Scene, seed: int = 0, n_false: int = 2, hit_rate: float = 0.95) -> list:
    """Scored ``(box, class, score)`` context-object detections for a scene.

    True objects are found with probability ``hit_rate`` as a jittered box scoring in
    [0.5, 1); ``n_false`` random false alarms score in [0, 0.5).
    """
    rng = scene_rng(seed, scene.index, stream=2)
    hgt, wid = scene.canvas.shape[:2]
    dets = []
    for box, cls in scene.objects:
        if rng.random() >= hit_rate:
            continue
        cx, cy = box.center
        jb = _clip_box(
            Box.from_center(cx + rng.uniform(-0.05, 0.05) * box.width, cy + rng.uniform(-0.05, 0.05) * box.height,
                            box.width * rng.uniform(0.95, 1.05), box.height * rng.uniform(0.95, 1.05)),
            (hgt, wid),
        ) or box
        dets.append((jb, int(cls), float(rng.uniform(0.5, 1.0))))
    for _ in range(n_false):
        s = rng.uniform(10, 0.5 * min(hgt, wid))
        fb = _clip_box(Box.from_center(rng.uniform(0, wid), rng.uniform(0, hgt), s, s * rng.uniform(0.5, 1.0)), (hgt, wid))
        if fb is not None:
            dets.append((fb, int(rng.integers(len(CONTEXT_OBJECTS))), float(rng.uniform(0.0, 0.5))))
    return dets


# ---------------------------------------------------------------------------
# crops


def _box_array(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], Box):
        return boxes_to_array(boxes)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def pad_canvases(canvases) -> np.ndarray:
    """Float32 canvases with a one-pixel zero border, as consumed by :func:`crop_padded`."""
    canvases = np.asarray(canvases, dtype=np.float32)
    n, hgt, wid, ch = canvases.shape
    padded = np.zeros((n, hgt + 2, wid + 2, ch), dtype=np.float32)
    padded[:, 1:-1, 1:-1] = canvases
    return padded


def crop_padded(padded: np.ndarray, scene_index, boxes, size=(24, 24), supersample: int = 2) -> np.ndarray:
    """Bilinear crop-and-resize from zero-bordered canvases to ``(B, C, h, w)`` float32.

    Each output pixel averages ``supersample**2`` bilinear taps; outside the canvas
    reads as zero.
    """
    boxes = _box_array(boxes)
    scene_index = np.asarray(scene_index, dtype=np.int64).reshape(-1)
    n_img, hp, wp, ch = padded.shape
    hgt, wid = hp - 2, wp - 2
    oh, ow = size
    ss = supersample
    b = len(boxes)
    if b == 0:
        return np.zeros((0, ch, oh, ow), dtype=np.float32)
    fy = (np.arange(oh * ss) + 0.5) / (oh * ss)
    fx = (np.arange(ow * ss) + 0.5) / (ow * ss)
    py = boxes[:, 1, None] + fy[None, :] * (boxes[:, 3] - boxes[:, 1])[:, None] - 0.5  # (B, oh*ss)
    px = boxes[:, 0, None] + fx[None, :] * (boxes[:, 2] - boxes[:, 0])[:, None] - 0.5
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy = (py - y0).astype(np.float32)
    wx = (px - x0).astype(np.float32)
    # taps beyond the border row/column read zeros from the padding
    yy = np.clip(y0.astype(np.int64) + 1, 0, hgt)
    xx = np.clip(x0.astype(np.int64) + 1, 0, wid)
    wy = np.where(y0 + 1 < 0, 0.0, np.where(y0 + 1 > hgt, 1.0, wy)).astype(np.float32)
    wx = np.where(x0 + 1 < 0, 0.0, np.where(x0 + 1 > wid, 1.0, wx)).astype(np.float32)
    flat = padded.reshape(-1, ch)
    top = scene_index[:, None, None] * (hp * wp) + yy[:, :, None] * wp + xx[:, None, :]
    v00, v01 = np.take(flat, top, axis=0), np.take(flat, top + 1, axis=0)
    v10, v11 = np.take(flat, top + wp, axis=0), np.take(flat, top + wp + 1, axis=0)
    wx_ = wx[:, None, :, None]
    upper = v00 + (v01 - v00) * wx_
    lower = v10 + (v11 - v10) * wx_
    out = upper + (lower - upper) * wy[:, :, None, None]
    out = out.reshape(b, oh, ss, ow, ss, ch).mean(axis=(2, 4))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def crop_regions(canvases, scene_index, boxes, size=(24, 24), supersample: int = 2) -> np.ndarray:
    """Crop boxes from ``(N, H, W, C)`` canvases; see :func:`crop_padded`."""
    return crop_padded(pad_canvases(canvases), scene_index, boxes, size, supersample)


class RegionCrops:
    """Region tensors for boxes on a set of canvases.

    ``crops[idx]`` renders the indexed regions; :meth:`materialize` renders all of
    them once into a float32 array.
    """

    def __init__(self, canvases, scene_index, boxes, size=(24, 24)):
        self.padded = pad_canvases(canvases)
        self.scene_index = np.asarray(scene_index, dtype=np.int64)
        self.boxes = _box_array(boxes)
        self.size = tuple(size)

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, idx):
        idx = np.asarray(idx)
        return crop_padded(self.padded, self.scene_index[idx], self.boxes[idx], self.size)

    def materialize(self, chunk: int = 1024) -> np.ndarray:
        out = np.empty((len(self), self.padded.shape[-1]) + self.size, dtype=np.float32)
        for s in range(0, len(self), chunk):
            out[s : s + chunk] = self[np.arange(s, min(len(self), s + chunk))]
        return out


# ---------------------------------------------------------------------------
# files

DATASET_VERSION = 1


def scene_to_record(scene: Scene, index: int) -> dict:
    return {
        "version": DATASET_VERSION,
        "scene_id": scene.scene_id,
        "tensor_index": index,
        "index": scene.index,
        "instances": [
            {
                "box": list(inst.box.as_array()),
                "keypoints": [[k.x, k.y, int(k.v)] for k in inst.keypoints] if inst.keypoints else None,
                "action": ACTIONS[inst.action] if inst.action is not None else None,
            }
            for inst in scene.instances
        ],
        "objects": [{"box": list(b.as_array()), "class": CONTEXT_OBJECTS[c]} for b, c in scene.objects],
        "proposals": [list(p.as_array()) for p in scene.proposals],
    }


def instance_from_record(r: dict) -> Instance:
    kps = None
    if r.get("keypoints") is not None:
        kps = tuple(Keypoint(float(x), float(y), bool(v)) for x, y, v in r["keypoints"])
    act = r.get("action")
    return Instance(Box(*r["box"]), kps, A[act] if act is not None else None)


def scene_from_record(r: dict, canvas: np.ndarray) -> Scene:
    if r.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported scene record version {r.get('version')}")
    return Scene(
        r["scene_id"],
        canvas,
        [instance_from_record(i) for i in r["instances"]],
        [(Box(*o["box"]), OBJ[o["class"]]) for o in r["objects"]],
        [Box(*p) for p in r["proposals"]],
        index=int(r["index"]),
    )


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f4"), allow_pickle=False)
    return buf.getvalue()


def save_scenes(scenes: Sequence[Scene], records_path, tensors_path) -> str:
    """Write scene records (JSON lines) and the canvas sidecar (``.npy``, little-endian f32).

    Returns the sha256 over both files' bytes.
    """
    lines = "".join(json.dumps(scene_to_record(s, i), sort_keys=True) + "\n" for i, s in enumerate(scenes))
    rec = lines.encode("utf-8")
    ten = _npy_bytes(np.stack([s.canvas for s in scenes]))
    with open(records_path, "wb") as fh:
        fh.write(rec)
    with open(tensors_path, "wb") as fh:
        fh.write(ten)
    return hashlib.sha256(rec + ten).hexdigest()


def load_scenes(records_path, tensors_path) -> list:
    canv = np.load(tensors_path, allow_pickle=False)
    scenes = []
    with open(records_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                scenes.append(scene_from_record(r, canv[r["tensor_index"]]))
    return scenes


def export_ppm(scene: Scene, path) -> None:
    """Binary PPM of the canvas for eyeballing."""
    img = np.clip(scene.canvas, 0.0, 1.0)
    data = (img * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6 {data.shape[1]} {data.shape[0]} 255\n".encode("ascii"))
        fh.write(data.tobytes())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
