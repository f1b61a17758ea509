"""Line-delimited interchange files: predictions and evaluation reports.

Every record is one JSON object per line, keys sorted, carrying ``"version"``.

Prediction records::

    {"version": 1, "image_id": str, "score": float, "class": int | str,
     "box": [x_min, y_min, x_max, y_max]}      # detection, action detection
    {"version": 1, "image_id": str, "score": float, "class": int | str,
     "keypoint": [x, y]}                       # keypoints, class = keypoint type
    {"version": 1, "image_id": str, "score": float, "class": int | str,
     "instance": int}                          # action classification, per GT person

``class`` is an index or a name from the task's vocabulary (``"person"`` for
detection, keypoint names, action names).

Report records, in order: one ``header``, one ``class`` per column, one
``summary``, then one ``curve`` per column (PR points for plotting)::

    {"record": "header", "version": 1, "task": ..., "label": ..., "dataset_hash": ...,
     "config_hash": ..., "seed": ..., "config": {...}, "loss_trace": {...} | null}
    {"record": "class", "version": 1, "name": ..., "ap": ..., "n_positives": ...}
    {"record": "summary", "version": 1, "map": ..., "excluded": ...}
    {"record": "curve", "version": 1, "name": ..., "recall": [...], "precision": [...]}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .evaluation import APResult, ScoredPrediction
from .geometry import KEYPOINT_NAMES, Box
from .labeling import ACTIONS

RECORD_VERSION = 1

TASK_CLASSES = {
    "det": ("person",),
    "apk": KEYPOINT_NAMES,
    "action-cls": ACTIONS,
    "action-det": ACTIONS,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: {exc.msg}") from None
    return out


# ---------------------------------------------------------------------------
# predictions


def _class_index(value, task: str) -> int:
    names = TASK_CLASSES[task]
    if isinstance(value, str):
        if value not in names:
            raise ValueError(f"unknown class {value!r} for task {task}")
        return names.index(value)
    idx = int(value)
    if not 0 <= idx < len(names):
        raise ValueError(f"class index {idx} outside [0, {len(names)}) for task {task}")
    return idx


def prediction_to_record(p: ScoredPrediction) -> dict:
    r = {"version": RECORD_VERSION, "image_id": p.image_id, "score": float(p.score), "class": int(p.label)}
    if p.box is not None:
        r["box"] = [float(v) for v in p.box.as_array()]
    else:
        r["keypoint"] = [float(p.keypoint[0]), float(p.keypoint[1])]
    return r


def prediction_from_record(r: dict, task: str) -> ScoredPrediction:
    if r.get("version") != RECORD_VERSION:
        raise ValueError(f"unsupported prediction record version {r.get('version')}")
    label = _class_index(r["class"], task)
    if "box" in r:
        return ScoredPrediction(r["image_id"], float(r["score"]), label, box=Box(*r["box"]))
    if "keypoint" in r:
        x, y = r["keypoint"]
        return ScoredPrediction(r["image_id"], float(r["score"]), label, keypoint=(float(x), float(y)))
    raise ValueError("prediction record needs a 'box' or 'keypoint' field")


def read_predictions(path, task: str) -> list:
    return [prediction_from_record(r, task) for r in read_jsonl(path)]


def write_predictions(path, preds: Sequence[ScoredPrediction]) -> None:
    write_jsonl(path, [prediction_to_record(p) for p in preds])


def classification_scores_from_records(records: Sequence[dict], gts: dict) -> tuple:
    """``(true actions, (N, A) scores)`` over all GT people from per-instance records.

    A record names its person by ``instance`` (index within the image) or by
    ``box`` (matched to the best-overlapping GT box). Unscored entries get -inf.
    """
    from .geometry import iou

    keys, truth = [], []
    for img in sorted(gts):
        for i, inst in enumerate(gts[img]):
            keys.append((img, i))
            truth.append(inst.action)
    pos = {k: n for n, k in enumerate(keys)}
    scores = np.full((len(keys), len(ACTIONS)), -np.inf)
    for r in records:
        if r.get("version") != RECORD_VERSION:
            raise ValueError(f"unsupported prediction record version {r.get('version')}")
        img = r["image_id"]
        if img not in gts:
            continue
        if "instance" in r:
            i = int(r["instance"])
        elif "box" in r:
            b = Box(*r["box"])
            ov = [iou(b, inst.box) for inst in gts[img]]
            if not ov:
                continue
            i = int(np.argmax(ov))
        else:
            raise ValueError("classification record needs an 'instance' or 'box' field")
        if (img, i) not in pos:
            raise ValueError(f"instance {i} does not exist in image {img!r}")
        a = _class_index(r["class"], "action-cls")
        scores[pos[(img, i)], a] = max(scores[pos[(img, i)], a], float(r["score"]))
    return np.array(truth), scores


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    task: str
    result: APResult
    dataset_hash: str
    config: dict
    seed: int = 0
    label: str = ""
    loss_trace: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def records(self) -> list:
        res = self.result
        head = {
            "record": "header",
            "version": RECORD_VERSION,
            "task": self.task,
            "label": self.label,
            "dataset_hash": self.dataset_hash,
            "config_hash": self.config_hash,
            "seed": int(self.seed),
            "config": self.config,
            "loss_trace": self.loss_trace,
        }
        head.update(self.extra)
        out = [head]
        for name, ap, n in zip(res.names, res.ap, res.n_positives):
            out.append({"record": "class", "version": RECORD_VERSION, "name": name, "ap": float(ap), "n_positives": int(n)})
        out.append({"record": "summary", "version": RECORD_VERSION, "map": float(res.mean), "excluded": int(res.excluded)})
        for name, c in zip(res.names, res.curves):
            out.append({
                "record": "curve",
                "version": RECORD_VERSION,
                "name": name,
                "recall": [float(v) for v in c.recall],
                "precision": [float(v) for v in c.precision],
            })
        return out


@dataclass
class LoadedReport:
    header: dict
    names: list
    ap: np.ndarray
    n_positives: np.ndarray
    mean: float
    curves: dict  # name -> (recall, precision)

    @property
    def label(self) -> str:
        return self.header.get("label") or self.header.get("task", "")


def load_report(path) -> LoadedReport:
    recs = read_jsonl(path)
    if not recs or recs[0].get("record") != "header":
        raise ValueError(f"{path}: missing report header")
    head = recs[0]
    if head.get("version") != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported report version {head.get('version')}")
    names, ap, npos, curves, mean = [], [], [], {}, None
    for r in recs[1:]:
        kind = r.get("record")
        if kind == "class":
            names.append(r["name"])
            ap.append(r["ap"])
            npos.append(r["n_positives"])
        elif kind == "summary":
            mean = r["map"]
        elif kind == "curve":
            curves[r["name"]] = (r["recall"], r["precision"])
    if mean is None:
        raise ValueError(f"{path}: missing summary record")
    return LoadedReport(head, names, np.array(ap), np.array(npos), float(mean), curves)


def format_table(rows: Sequence[tuple], names: Sequence[str], title: str = "AP (%)") -> str:
    """Fixed-width table: one row per ``(label, per-class APs, mAP)``, APs shown in percent."""
    labels = [r[0] for r in rows]
    lw = max([len(title)] + [len(l) for l in labels])
    widths = [max(5, len(n)) for n in names]
    head = title.ljust(lw) + " | " + " ".join(n.rjust(w) for n, w in zip(names, widths)) + " |   mAP"
    lines = [head, "-" * len(head)]
    for label, aps, mean in rows:
        cells = " ".join(f"{100 * a:{w}.1f}" for a, w in zip(aps, widths))
        lines.append(f"{label.ljust(lw)} | {cells} | {100 * mean:5.1f}")
    return "\n".join(lines) + "\n"


def report_table(report: Report) -> str:
    label = report.label or report.task
    title = {"apk": "APK [alpha=0.2]", "det": "AP (%)"}.get(report.task, "AP (%)")
    return format_table([(label, report.result.ap, report.result.mean)], report.result.names, title)
