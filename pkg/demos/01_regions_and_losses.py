"""Walk through one synthetic scene: proposals, their labels, and the three losses.

    python demos/01_regions_and_losses.py
"""

from collections import Counter

import numpy as np

from mtrcnn.geometry import iou
from mtrcnn.labeling import ACTIONS, DetLabel, build_samples
from mtrcnn.losses import HeadOutputs, loss_total, softmax
from mtrcnn.pipeline import PRESETS
from mtrcnn.synthdata import SceneSpec, export_ppm, generate_scene, generate_proposals


def main():
    scene = generate_scene(SceneSpec(seed=0), 3)
    scene.proposals = generate_proposals(scene, n_per_instance=16, n_background=16)
    print(f"scene {scene.scene_id}: {len(scene.instances)} people, {len(scene.objects)} objects")
    for i, inst in enumerate(scene.instances):
        print(f"  person {i}: box {np.round(inst.box.as_array(), 1)}, action {ACTIONS[inst.action]}")
    export_ppm(scene, "scene.ppm")
    print("canvas written to scene.ppm")

    samples = build_samples(scene.proposals, scene.instances)
    counts = Counter(s.det_label.name for s in samples)
    print("\ndetection labels:", dict(counts))
    print("regions with pose targets:", sum(s.pose_active for s in samples))
    print("regions with an action label:", sum(s.action_active for s in samples))

    # a few regions near the label thresholds
    print("\nbest IoU  det       pose  action")
    for s in sorted(samples, key=lambda s: -max(iou(s.region, i.box) for i in scene.instances))[::8]:
        best = max(iou(s.region, i.box) for i in scene.instances)
        act = ACTIONS[s.action_label] if s.action_active else "-"
        print(f"  {best:.3f}  {s.det_label.name:<8}  {str(s.pose_active):<5} {act}")

    # an untrained network outputs roughly uniform probabilities
    rng = np.random.default_rng(0)
    out = HeadOutputs(softmax(rng.normal(0, 0.1, 2)), rng.normal(0, 0.1, 26), softmax(rng.normal(0, 0.1, 10)))
    positive = next(s for s in samples if s.det_label == DetLabel.POSITIVE and s.action_active)
    print("\nloss of a near-uniform prediction on a positive region")
    for name, w in PRESETS.items():
        total, parts, _ = loss_total(out, positive, w)
        shown = "  ".join(f"{k} {v:.3f}" for k, v in parts.items())
        print(f"  {name:<22} total {total:.3f}   {shown}")
    print(f"  (ln 2 = {np.log(2):.3f}, ln 10 = {np.log(10):.3f})")


if __name__ == "__main__":
    main()
