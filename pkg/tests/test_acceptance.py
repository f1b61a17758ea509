"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. Criteria 6 to 8 train networks and take most of the
runtime (about 17 minutes on one core).
"""

import math
import time
import warnings

import numpy as np
import pytest

import oracles
from mtrcnn import pipeline as pl
from mtrcnn.cli import main
from mtrcnn.evaluation import (
    ScoredPrediction,
    average_precision,
    evaluate_action_detection,
    evaluate_apk,
    match_detections,
    nms_predictions,
    pr_curve,
)
from mtrcnn.geometry import KEYPOINT_NAMES, NUM_KEYPOINTS, Box, Keypoint, NormalizedKeypoint, iou
from mtrcnn.labeling import ACTIONS, DetLabel, Instance, RegionSample, label_action, label_detection, label_pose
from mtrcnn.losses import BatchTargets, TaskWeights, loss_action, loss_detection, loss_pose, softmax
from mtrcnn.network import ConvSpec, NetworkConfig, RegionDataset, TrainConfig, init_params, loss_and_grads, train
from mtrcnn.rescore import build_context_feature, svm_objective, svm_train
from mtrcnn.synthdata import SceneSpec, generate_dataset

SMALL = NetworkConfig(input_shape=(3, 8, 8), conv=(ConvSpec(4), ConvSpec(6)), fc_widths=(10, 8))
REGION = Box(0, 0, 10, 10)


def random_sample(rng):
    det = (DetLabel.NEGATIVE, DetLabel.POSITIVE, DetLabel.IGNORE)[rng.integers(0, 3)]
    kps = None
    if rng.random() < 0.6:
        xy = rng.uniform(-0.5, 0.5, (NUM_KEYPOINTS, 2))
        kps = tuple(NormalizedKeypoint(x, y, bool(rng.random() < 0.8)) for x, y in xy)
    action = int(rng.integers(0, len(ACTIONS))) if rng.random() < 0.6 else None
    return RegionSample(REGION, det, kps, action, 0 if kps else None)


def same_value(got, want):
    """Matching decisions are compared exactly; AP values up to float summation rounding."""
    return abs(got - want) <= 1e-12


def rel_error(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient fidelity")
def test_gradient_fidelity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    eps = 1e-6
    worst = 0.0

    # the three losses against their inputs (logits for the softmax heads)
    for _ in range(20):
        z = rng.normal(size=2)
        l = int(rng.integers(0, 2))
        g = softmax(z) - np.eye(2)[l]
        for i in range(2):
            d = np.eye(2)[i] * eps
            fd = (loss_detection(softmax(z + d), l)[0] - loss_detection(softmax(z - d), l)[0]) / (2 * eps)
            worst = max(worst, rel_error(loss_detection(softmax(z), l)[1][i], fd), rel_error(g[i], fd))
        z = rng.normal(size=len(ACTIONS))
        a = int(rng.integers(0, len(ACTIONS)))
        _, ga = loss_action(softmax(z), a)
        for i in range(len(ACTIONS)):
            d = np.eye(len(ACTIONS))[i] * eps
            fd = (loss_action(softmax(z + d), a)[0] - loss_action(softmax(z - d), a)[0]) / (2 * eps)
            worst = max(worst, rel_error(ga[i], fd))
        t = random_sample(rng).pose_targets or tuple(NormalizedKeypoint(0.1, 0.1, True) for _ in range(NUM_KEYPOINTS))
        pred = rng.normal(size=2 * NUM_KEYPOINTS)
        _, gp = loss_pose(pred, t)
        for i in range(2 * NUM_KEYPOINTS):
            d = np.eye(2 * NUM_KEYPOINTS)[i] * eps
            fd = (loss_pose(pred + d, t)[0] - loss_pose(pred - d, t)[0]) / (2 * eps)
            worst = max(worst, rel_error(gp[i], fd))
    head_worst = worst

    # 100 (sample, parameter) probes through the whole network and weighted loss
    weight_sets = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 2), (1, 0, 1)]
    params = init_params(SMALL, seed=11)
    names = sorted(params)
    probes = 0
    net_worst = 0.0
    while probes < 100:
        w = TaskWeights(*weight_sets[probes % len(weight_sets)]) if probes < 50 else TaskWeights(*rng.uniform(0.1, 2, 3))
        x = rng.normal(size=(1,) + SMALL.input_shape)
        s = random_sample(rng)
        targets = BatchTargets.from_samples([s], NUM_KEYPOINTS)
        _, _, grads = loss_and_grads(params, SMALL, x, targets, w)
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(n)) for n in params[name].shape)
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name][idx] += eps
        minus[name][idx] -= eps
        fd = (loss_and_grads(plus, SMALL, x, targets, w)[0] - loss_and_grads(minus, SMALL, x, targets, w)[0]) / (2 * eps)
        net_worst = max(net_worst, rel_error(grads[name][idx], fd))
        probes += 1
    elapsed = time.perf_counter() - start
    record_property("detail", f"{probes} network probes, worst rel err {net_worst:.1e} (heads {head_worst:.1e}), {elapsed:.1f}s")
    assert head_worst <= 1e-4 and net_worst <= 1e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "loss unit values")
def test_loss_unit_values(record_property):
    d = loss_detection([0.5, 0.5], 0)[0]
    a = loss_action(np.full(10, 0.1), 3)[0]
    t = tuple(NormalizedKeypoint(0.0, 0.0, i == 0) for i in range(NUM_KEYPOINTS))
    pred = np.full(2 * NUM_KEYPOINTS, 9.0)
    pred[:2] = (0.3, 0.4)
    p = loss_pose(pred, t)[0]
    record_property("detail", f"D={d!r} A={a!r} P={p!r}")
    assert abs(d - math.log(2)) <= 1e-9
    assert abs(a - math.log(10)) <= 1e-9
    assert abs(p - 0.25 / 13) <= 1e-9
    exact = np.array([[k.x, k.y] for k in t]).ravel()
    onehot = np.eye(10)[3]
    zeros = [
        loss_detection([0.0, 1.0], 1)[0],
        loss_detection([1.0, 0.0], 0)[0],
        loss_action(onehot, 3)[0],
        loss_action(np.full(10, 0.1), None)[0],
        loss_pose(exact, t)[0],
        loss_pose(pred, tuple(NormalizedKeypoint(0, 0, False) for _ in range(NUM_KEYPOINTS)))[0],
        loss_pose(pred, None)[0],
    ]
    assert all(z == 0.0 for z in zeros)


@pytest.mark.criterion(3, "lambda isolation")
def test_lambda_isolation(record_property):
    rng = np.random.default_rng(3)
    data = RegionDataset(rng.normal(size=(60,) + SMALL.input_shape), [random_sample(rng) for _ in range(60)])
    checked = []
    for w in [(0, 1, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (0, 1, 1), (0, 0.5, 2)]:
        cfg = TrainConfig(iterations=40, batch_size=8, weights=TaskWeights(*w), seed=5, positive_fraction=None)
        init = init_params(SMALL, seed=5)
        res = train(data, SMALL, cfg)
        for head, lam in zip(("det", "pose", "action"), w):
            same = all(np.array_equal(res.params[f"{head}.{p}"], init[f"{head}.{p}"]) for p in ("W", "b"))
            assert same == (lam == 0), (w, head)
            checked.append(head)
    record_property("detail", f"{len(checked)} heads checked over 7 weight settings")


@pytest.mark.criterion(4, "metric oracle equivalence")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(4)
    cases = 0
    # average precision from raw flags
    for _ in range(300):
        n = int(rng.integers(1, 7))
        scores = [float(s) for s in rng.integers(0, 4, n)]
        tp = [bool(f) for f in rng.random(n) < 0.5]
        n_pos = sum(tp) + int(rng.integers(0, 3))
        if n_pos == 0:
            continue
        order = oracles.rank(scores)
        for method in ("continuous", "raw"):
            want = oracles.ap_from_flags([scores[i] for i in order], [tp[i] for i in order], n_pos, method)
            assert same_value(average_precision(pr_curve(scores, tp, n_pos), method), want)
        cases += 1
    # greedy matching, checked against exhaustive enumeration
    for _ in range(300):
        preds, gts = oracles.random_detection_case(rng)
        sp = [ScoredPrediction(i, s, 0, box=Box(*b)) for i, s, b in preds]
        curve = match_detections(sp, {k: [Box(*b) for b in v] for k, v in gts.items()})
        flags = oracles.exhaustive_greedy_flags(preds, gts)
        assert list(curve.tp) == [flags[i] for i in oracles.rank([p[1] for p in preds])]
        cases += 1
    # APK
    for _ in range(300):
        people = oracles.random_people(rng)
        k = int(rng.integers(NUM_KEYPOINTS))
        preds = oracles.random_keypoint_preds(rng, people, k)
        insts = {img: [Instance(Box(0, 0, 20, 20), tuple(Keypoint(*t) for t in p), None) for p in v] for img, v in people.items()}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = evaluate_apk([ScoredPrediction(i, s, k, keypoint=xy) for i, s, xy in preds], insts)
        flags = oracles.apk_flags(preds, people, k)
        order = oracles.rank([p[1] for p in preds])
        assert list(r.curves[k].tp) == [flags[i] for i in order]
        n_pos = oracles.apk_positives(people, k)
        want = oracles.ap_from_flags([preds[i][1] for i in order], [flags[i] for i in order], n_pos) if n_pos else 0.0
        assert same_value(r.ap[k], want)
        cases += 1
    # action detection
    for _ in range(300):
        preds, gts = oracles.random_detection_case(rng)
        acts = {img: [int(rng.integers(0, 2)) for _ in v] for img, v in gts.items()}
        labels = [int(rng.integers(0, 2)) for _ in preds]
        g_inst = {img: [Instance(Box(*b), None, a) for b, a in zip(v, acts[img])] for img, v in gts.items()}
        sp = [ScoredPrediction(i, s, l, box=Box(*b)) for (i, s, b), l in zip(preds, labels)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = evaluate_action_detection(sp, g_inst)
        for a in range(2):
            pa = [p for p, l in zip(preds, labels) if l == a]
            ga = {img: [b for b, x in zip(v, acts[img]) if x == a] for img, v in gts.items()}
            n_pos = sum(len(v) for v in ga.values())
            assert same_value(r.ap[a], oracles.detection_ap(pa, ga) if n_pos else 0.0)
        cases += 1
    # invariance under a strictly monotone score transform
    rankings = 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        scores = rng.integers(-16, 17, n) / 8.0
        tp = rng.random(n) < 0.5
        n_pos = max(int(tp.sum()), 1)
        assert average_precision(pr_curve(scores, tp, n_pos)) == average_precision(pr_curve(oracles.monotone(scores), tp, n_pos))
        rankings += 1
    record_property("detail", f"{cases} oracle cases, {rankings} monotone rankings")
    assert cases >= 1000 and rankings == 100


@pytest.mark.criterion(5, "threshold strictness")
def test_threshold_boundaries(record_property):
    def overlapping(o):
        return Box(0, 0, 10 * o, 10)

    xs = np.linspace(1, 9, NUM_KEYPOINTS)
    person = lambda box, action=0: Instance(box, tuple(Keypoint(float(x), float(x), True) for x in xs), action)
    for o in (0.5, 0.3, 0.7, 0.1):
        assert iou(REGION, overlapping(o)) == o
    assert label_detection(REGION, [person(overlapping(0.5))]) == DetLabel.IGNORE
    assert label_detection(REGION, [person(overlapping(0.3))]) == DetLabel.IGNORE
    assert label_pose(REGION, [person(overlapping(0.5))]) is None
    assert label_action(REGION, [person(overlapping(0.7))]) is None
    assert label_action(REGION, [person(overlapping(0.71))]) == 0

    pred = [ScoredPrediction("a", 1.0, 0, box=overlapping(0.5))]
    assert not match_detections(pred, {"a": [REGION]}).tp.any()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert evaluate_action_detection(pred, {"a": [Instance(REGION, None, 0)]}).ap[0] == 0.0

    f = build_context_feature(REGION, 0.0, [], [(overlapping(0.1), 0, 0.9)])
    assert not f.object_max.any()

    # torso height 5, so the radius is exactly 1
    names = {n: i for i, n in enumerate(KEYPOINT_NAMES)}
    kps = [Keypoint(3.0, 3.0, True)] * NUM_KEYPOINTS
    for n, xy in (("R_Shoulder", (0, 0)), ("L_Shoulder", (2, 0)), ("R_Hip", (0, 5)), ("L_Hip", (2, 5))):
        kps[names[n]] = Keypoint(float(xy[0]), float(xy[1]), True)
    p = Instance(Box(-1, -1, 10, 10), tuple(kps), None)
    nose = names["Nose"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r = evaluate_apk([ScoredPrediction("a", 1.0, nose, keypoint=(4.0, 3.0))], {"a": [p]})
    assert r.ap[nose] == 0.0

    # suppression needs IoU above the NMS threshold
    kept = nms_predictions([ScoredPrediction("a", 2.0, 0, box=REGION), ScoredPrediction("a", 1.0, 0, box=overlapping(0.3))], 0.3)
    assert len(kept) == 2
    record_property("detail", "IoU 0.5/0.3/0.7/0.1 and distance 0.2*H fixtures")


@pytest.mark.criterion(6, "end-to-end learnability")
def test_end_to_end(record_property):
    start = time.perf_counter()
    spec = SceneSpec()
    train_scenes = generate_dataset(spec, 800)
    val_scenes = generate_dataset(spec, 200, start=800)
    R = pl.build_region_set(train_scenes, jitter=pl.DEFAULT_JITTER)
    V = pl.build_region_set(val_scenes)

    res = pl.train_on_regions(R, pl.default_train_config("detection"))
    out = pl.run_predict(res.params, res.config, V)
    det = pl.evaluate_predictions("det", pl.detection_predictions(out, V), val_scenes).mean

    res = pl.train_on_regions(R, pl.default_train_config("pose"))
    models = pl.train_keypoint_svms(pl.run_predict(res.params, res.config, R), R, pl.ground_truth_table(train_scenes))
    out = pl.run_predict(res.params, res.config, V)
    apk = pl.evaluate_predictions("apk", pl.keypoint_predictions(out, V, models), val_scenes).mean

    res = pl.train_on_regions(R, pl.default_train_config("action"))
    G = pl.build_region_set(val_scenes, proposals=False, ground_truth=True)
    out = pl.run_predict(res.params, res.config, G)
    act = pl.action_classification(pl.true_actions(G, val_scenes), pl.action_classification_scores(out)).mean

    elapsed = time.perf_counter() - start
    iters = pl.default_train_config("detection").iterations
    record_property("detail", f"det AP {det:.3f}, APK {apk:.3f}, action mAP {act:.3f}, {iters} iterations, {elapsed / 60:.1f} min")
    assert iters <= 20_000
    assert det >= 0.8 and apk >= 0.5 and act >= 0.7
    assert elapsed <= 15 * 60


def action_detection_map(seed, preset, R, G, V, val_scenes, iterations):
    cfg = pl.default_train_config(preset, iterations=iterations, seed=seed, lr_decay_every=2 * iterations // 3)
    res = pl.train_on_regions(R, cfg)
    out = pl.run_predict(res.params, res.config, V)
    if preset == "detection-action":
        scores = pl.product_scores(out)
    else:
        feats = pl.run_predict(res.params, res.config, G)
        models = pl.train_action_svms(feats, G, pl.SvmConfig(seed=seed), background=False)
        scores = pl.action_classification_scores(out, models)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return pl.evaluate_predictions("action-det", pl.action_detection_predictions(scores, V), val_scenes).mean


@pytest.mark.criterion(7, "joint-training ordering")
def test_joint_training_ordering(record_property):
    maps = {"detection-action": [], "detection": [], "action": []}
    for seed in range(5):
        spec = SceneSpec(seed=seed)
        train_scenes = generate_dataset(spec, 300)
        val_scenes = generate_dataset(spec, 100, start=300)
        R = pl.build_region_set(train_scenes, jitter=10, jitter_seed=seed)
        G = pl.build_region_set(train_scenes, proposals=False, ground_truth=True)
        V = pl.build_region_set(val_scenes)
        for preset in maps:
            maps[preset].append(action_detection_map(seed, preset, R, G, V, val_scenes, 3000))
    med = {k: float(np.median(v)) for k, v in maps.items()}
    record_property("detail", "median mAP: " + ", ".join(f"{k} {v:.3f}" for k, v in med.items()))
    assert med["detection-action"] >= med["detection"]
    assert med["detection-action"] >= med["action"]


CONTEXT_ACTIONS = ("ridinghorse", "ridingbike", "usingcomputer", "jumping")


def context_spec(seed):
    """Actions look alike and objects are invisible; only the co-occurring object tells them apart."""
    weights = tuple(1.0 if a in CONTEXT_ACTIONS else 0.0 for a in ACTIONS)
    co = {"ridinghorse": {"horse": 1.0}, "ridingbike": {"bike": 1.0}, "usingcomputer": {"tvmonitor": 1.0}}
    return SceneSpec(seed=seed, action_weights=weights, cooccurrence=co, pose_cue=0.0, render_objects=False,
                     distractor_object_p=0.0)


@pytest.mark.criterion(8, "context rescoring effect")
def test_context_rescoring(record_property):
    gains = []
    for seed in range(5):
        spec = context_spec(seed)
        train_scenes = generate_dataset(spec, 300)
        val_scenes = generate_dataset(spec, 100, start=300)
        R = pl.build_region_set(train_scenes, jitter=5, jitter_seed=seed)
        res = pl.train_on_regions(R, pl.default_train_config("action", iterations=2000, seed=seed))
        Gt = pl.build_region_set(train_scenes, proposals=False, ground_truth=True)
        Gv = pl.build_region_set(val_scenes, proposals=False, ground_truth=True)
        st = pl.action_classification_scores(pl.run_predict(res.params, res.config, Gt))
        sv = pl.action_classification_scores(pl.run_predict(res.params, res.config, Gv))
        ct = pl.context_features(st, Gt, pl.object_detection_table(train_scenes, seed))
        cv = pl.context_features(sv, Gv, pl.object_detection_table(val_scenes, seed))
        models = pl.fit_context_rescorer(ct, pl.true_actions(Gt, train_scenes), pl.SvmConfig(seed=seed))
        truth = pl.true_actions(Gv, val_scenes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            raw = pl.action_classification(truth, sv).mean
            ctx = pl.action_classification(truth, pl.apply_context_rescorer(cv, models)).mean
        gains.append(ctx - raw)
    med = float(np.median(gains))
    record_property("detail", f"median gain {med:+.3f} over seeds " + " ".join(f"{g:+.3f}" for g in gains))
    assert med >= 0.05


@pytest.mark.criterion(9, "determinism")
def test_cli_determinism(tmp_path, record_property):
    import json

    (tmp_path / "gen.json").write_text(json.dumps({"seed": 7, "splits": {"train": 16, "val": 8}}))
    (tmp_path / "train.json").write_text(json.dumps({
        "network": {"input_shape": [3, 16, 16], "conv": [{"channels": 4}, {"channels": 8}], "fc_widths": [16, 16]},
        "jitter": 2,
    }))
    for run in ("one", "two"):
        d = tmp_path / run
        assert main(["generate", str(tmp_path / "gen.json"), str(d / "ds")]) == 0
        assert main(["train", str(d / "ds"), "--out", str(d / "net.ckpt"), "--preset", "detection-pose-action",
                     "--config", str(tmp_path / "train.json"), "--iterations", "40"]) == 0
        for task in ("det", "action-det", "action-cls", "apk"):
            assert main(["evaluate", "--dataset", str(d / "ds"), "--checkpoint", str(d / "net.ckpt"), "--task", task,
                         "--rescore" if task != "apk" else "--seed=0", "--out", str(d / task)]) == 0
    files = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "one" / f).read_bytes() != (tmp_path / "two" / f).read_bytes()]
    record_property("detail", f"{len(files)} artifacts compared, {len(differ)} differ")
    assert len(files) >= 15 and not differ


def noisy_problem(seed, n=20):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    X = rng.normal(size=(n, d))
    y = np.where(X @ rng.normal(size=d) + 0.7 * rng.normal(size=n) >= 0, 1.0, -1.0)
    if len(set(y)) < 2:
        y[0] = -y[0]
    return X, y


@pytest.mark.criterion(10, "SVM correctness")
def test_svm_dual_oracle(record_property):
    cp = pytest.importorskip("cvxpy")
    worst = 0.0
    for seed in range(50):
        X, y = noisy_problem(1000 + seed)
        a = cp.Variable(len(y))
        dual = cp.Maximize(cp.sum(a) - 0.5 * cp.sum_squares((y[:, None] * X).T @ a))
        cp.Problem(dual, [a >= 0, a <= 1.0, y @ a == 0]).solve()
        opt = float(dual.value)
        got = svm_objective(svm_train(X, y, C=1.0), X=X, y=y)
        worst = max(worst, got / opt - 1)
    record_property("detail", f"50 problems at C=1, worst relative gap {worst:.2e}")
    assert worst <= 0.01
