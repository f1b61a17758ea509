"""Train small single-task and joint networks and evaluate every protocol.

This is a scaled-down version of the full experiment (fewer scenes and iterations),
so it finishes in a few minutes on one core. Numbers are lower than the full runs.

    python demos/02_train_and_evaluate.py
"""

import time
import warnings

from mtrcnn import pipeline as pl
from mtrcnn.records import format_table
from mtrcnn.synthdata import SceneSpec, generate_dataset

ITERATIONS = 2000

warnings.simplefilter("ignore", RuntimeWarning)  # classes missing from a small val split


def train(preset, regions):
    cfg = pl.default_train_config(preset, iterations=ITERATIONS, lr_decay_every=1500)
    t = time.perf_counter()
    res = pl.train_on_regions(regions, cfg)
    last = res.trace["total"][-100:].mean()
    print(f"  {preset:<22} {ITERATIONS} iterations in {time.perf_counter() - t:5.1f}s, final loss {last:.3f}")
    return res


def main():
    spec = SceneSpec(seed=0)
    train_scenes = generate_dataset(spec, 200)
    val_scenes = generate_dataset(spec, 60, start=200)
    R = pl.build_region_set(train_scenes, jitter=8)
    V = pl.build_region_set(val_scenes)
    G = pl.build_region_set(val_scenes, proposals=False, ground_truth=True)
    Gt = pl.build_region_set(train_scenes, proposals=False, ground_truth=True)
    print(f"{len(R)} training regions, {len(V)} validation proposals, {len(G)} validation people\n")

    nets = {p: train(p, R) for p in ("detection", "pose", "action", "detection-action")}

    def run(name, regions):
        res = nets[name]
        return pl.run_predict(res.params, res.config, regions)

    det = pl.evaluate_predictions("det", pl.detection_predictions(run("detection", V), V), val_scenes)
    print("\n" + format_table([("detection", det.ap, det.mean)], det.names))

    models = pl.train_keypoint_svms(run("pose", R), R, pl.ground_truth_table(train_scenes))
    apk = pl.evaluate_predictions("apk", pl.keypoint_predictions(run("pose", V), V, models), val_scenes)
    print(format_table([("pose", apk.ap, apk.mean)], apk.names, "APK [alpha=0.2]"))

    truth = pl.true_actions(G, val_scenes)
    cls = pl.action_classification(truth, pl.action_classification_scores(run("action", G)))
    print(format_table([("action", cls.ap, cls.mean)], cls.names))

    # action detection: joint network vs single-task networks with SVMs on their features
    rows = []
    scores = pl.product_scores(run("detection-action", V))
    r = pl.evaluate_predictions("action-det", pl.action_detection_predictions(scores, V), val_scenes)
    rows.append(("Detection-Action", r.ap, r.mean))
    for name in ("detection", "action"):
        svms = pl.train_action_svms(run(name, Gt), Gt, background=False)
        scores = pl.action_classification_scores(run(name, V), svms)
        r = pl.evaluate_predictions("action-det", pl.action_detection_predictions(scores, V), val_scenes)
        rows.append((f"{name.capitalize()}-only + SVM", r.ap, r.mean))
    print(format_table(rows, r.names))


if __name__ == "__main__":
    main()
