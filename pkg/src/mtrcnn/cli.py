"""Command-line interface: ``generate``, ``train``, ``evaluate`` and ``report``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(divergence, incompatible inputs). Log lines (with timestamps) go to stderr only.
``--threads`` (default: ``$MTRCNN_THREADS`` or 1) bounds BLAS threads and the
worker processes used for scene generation.

Files
-----
Generation config (JSON; every key optional)::

    {"seed": 0,
     "splits": {"train": 800, "val": 200},
     "proposals": {"n_per_instance": 16, "n_background": 16},
     "scene": {<SceneSpec field>: value, ...}}

Dataset directory written by ``generate``:

``manifest.json``
    ``{"version", "seed", "config", "config_hash", "dataset_hash",
    "splits": {name: {"records", "tensors", "n_scenes", "start", "sha256"}}}``.
    ``dataset_hash`` is the sha256 over the split hashes in split order.
``<split>.jsonl``
    One scene per line: ``version``, ``scene_id``, ``index`` (generator index),
    ``tensor_index`` (row in the sidecar), ``instances`` (each with ``box``
    ``[x_min, y_min, x_max, y_max]``, ``keypoints`` as 13 ``[x, y, visible]``
    triples in the order Nose, R_Shoulder, R_Elbow, R_Wrist, L_Shoulder, L_Elbow,
    L_Wrist, R_Hip, R_Knee, R_Ankle, L_Hip, L_Knee, L_Ankle, and ``action`` by
    name), ``objects`` (``box`` and ``class`` name) and ``proposals`` (boxes).
``<split>.npy``
    Canvases as a little-endian float32 ``(N, H, W, 3)`` array.

Training config (JSON; every key optional)::

    {"network": {<NetworkConfig fields>}, "train": {<TrainConfig fields>}, "jitter": 20}

``train`` writes the checkpoint (see ``network.save_checkpoint``) and a loss trace
with one ``{"version", "iteration", "total", "det", "pose", "action"}`` record per
iteration. Prediction and report records are described in ``mtrcnn.records``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace

import numpy as np

from . import pipeline as pl
from .labeling import ACTIONS
from .losses import TaskWeights
from .network import NetworkConfig, TrainConfig, TrainingDiverged, load_checkpoint, predict, save_checkpoint
from .records import (
    RECORD_VERSION,
    Report,
    canonical_json,
    classification_scores_from_records,
    config_hash,
    format_table,
    load_report,
    read_jsonl,
    read_predictions,
    report_table,
    write_jsonl,
)
from .evaluation import evaluate_action_classification, nms_predictions
from .synthdata import SceneSpec, file_sha256, generate_proposals, generate_scene, load_scenes, save_scenes

log = logging.getLogger("mtrcnn")

MANIFEST_VERSION = 1
THREADS_ENV = "MTRCNN_THREADS"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class RuntimeFailure(Exception):
    """Valid request that cannot be carried out (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# generate

GENERATE_KEYS = {"seed", "splits", "proposals", "scene"}


def parse_generate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - GENERATE_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise UsageError("seed must be a non-negative integer")
    splits = cfg.get("splits", {"train": 800, "val": 200})
    if not isinstance(splits, dict) or not splits:
        raise UsageError("splits must map split names to scene counts")
    for name, n in splits.items():
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise UsageError(f"split {name!r} needs a positive scene count")
        if not name.replace("_", "").replace("-", "").isalnum():
            raise UsageError(f"split name {name!r} must be alphanumeric")
    props = {"n_per_instance": 16, "n_background": 16}
    extra = cfg.get("proposals", {})
    if not isinstance(extra, dict) or set(extra) - set(props):
        raise UsageError(f"proposals accepts only {sorted(props)}")
    props.update(extra)
    for k, v in props.items():
        if not isinstance(v, int) or v < 0:
            raise UsageError(f"proposals.{k} must be a non-negative integer")
    scene = dict(cfg.get("scene", {}))
    known = {f.name for f in fields(SceneSpec)} - {"seed"}
    if set(scene) - known:
        raise UsageError(f"unknown scene keys: {sorted(set(scene) - known)}")
    try:
        spec = SceneSpec(**scene, seed=seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config: {exc}") from None
    return {"seed": seed, "splits": dict(splits), "proposals": props, "scene": spec.to_dict()}


def _scene_worker(args):
    spec_dict, start, stop, props = args
    spec = SceneSpec.from_dict(spec_dict)
    out = []
    for i in range(start, stop):
        sc = generate_scene(spec, i)
        sc.proposals = generate_proposals(sc, props["n_per_instance"], props["n_background"], seed=spec.seed)
        out.append(sc)
    return out


def _generate_scenes(spec_dict, start, n, props, threads):
    if threads <= 1 or n < 2 * threads:
        return _scene_worker((spec_dict, start, start + n, props))
    bounds = np.linspace(start, start + n, threads * 4 + 1).astype(int)
    jobs = [(spec_dict, int(a), int(b), props) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(_scene_worker, jobs))  # map preserves job order
    return [sc for part in parts for sc in part]


def cmd_generate(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    cfg = parse_generate_config(raw)
    out = os.path.abspath(args.output)
    if os.path.exists(out) and not args.force:
        raise UsageError(f"{out} exists (use --force to replace it)")
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".mtrcnn-gen-", dir=parent)
    try:
        splits = {}
        start = 0
        for name, n in cfg["splits"].items():
            log.info("generating split %s: %d scenes", name, n)
            scenes = _generate_scenes(cfg["scene"], start, n, cfg["proposals"], args.threads)
            digest = save_scenes(scenes, os.path.join(tmp, f"{name}.jsonl"), os.path.join(tmp, f"{name}.npy"))
            splits[name] = {"records": f"{name}.jsonl", "tensors": f"{name}.npy", "n_scenes": n, "start": start, "sha256": digest}
            start += n
        dataset_hash = config_hash([splits[k]["sha256"] for k in splits])
        manifest = {
            "version": MANIFEST_VERSION,
            "seed": cfg["seed"],
            "config": cfg,
            "config_hash": config_hash(cfg),
            "dataset_hash": dataset_hash,
            "splits": splits,
        }
        with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        if os.path.exists(out):
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"dataset {dataset_hash} -> {out}")
    return 0


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            m = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read dataset manifest: {exc}") from None
    if m.get("version") != MANIFEST_VERSION:
        raise UsageError(f"unsupported manifest version {m.get('version')}")
    return m


def load_split(dataset_dir, manifest: dict, split: str):
    if split not in manifest["splits"]:
        raise UsageError(f"dataset has no split {split!r} (have {sorted(manifest['splits'])})")
    s = manifest["splits"][split]
    return load_scenes(os.path.join(dataset_dir, s["records"]), os.path.join(dataset_dir, s["tensors"]))


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = {"network", "train", "jitter"}


def parse_train_config(raw: dict) -> tuple:
    if not isinstance(raw, dict) or set(raw) - TRAIN_KEYS:
        raise UsageError(f"training config accepts only {sorted(TRAIN_KEYS)}")
    try:
        net = NetworkConfig.from_dict(raw["network"]) if "network" in raw else pl.default_network_config()
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid network config: {exc}") from None
    train_over = dict(raw.get("train", {}))
    if "weights" in train_over:
        raise UsageError("set task weights with --preset or --lambdas, not in the config file")
    jitter = raw.get("jitter", pl.DEFAULT_JITTER)
    if not isinstance(jitter, int) or jitter < 0:
        raise UsageError("jitter must be a non-negative integer")
    return net, train_over, jitter


def _weights_from_args(args) -> tuple:
    if args.preset and args.lambdas:
        raise UsageError("give either --preset or --lambdas")
    if args.preset:
        return args.preset, pl.PRESETS[args.preset]
    if args.lambdas:
        try:
            return None, TaskWeights(*args.lambdas)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    raise UsageError("one of --preset or --lambdas is required")


def _trace_summary(trace: dict, window: int = 100) -> dict:
    n = len(trace["total"])
    out = {"window": window}
    for k, v in trace.items():
        out[k] = [float(np.mean(v[i : i + window])) for i in range(0, n, window)]
    return out


def cmd_train(args) -> int:
    preset, weights = _weights_from_args(args)
    raw = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read training config: {exc}") from None
    net, train_over, jitter = parse_train_config(raw)
    if args.jitter is not None:
        jitter = args.jitter
    for key in ("iterations", "seed", "learning_rate", "batch_size"):
        v = getattr(args, key)
        if v is not None:
            train_over[key] = v
    manifest = load_manifest(args.dataset)
    done = 0
    params = None
    if args.resume:
        params, net, meta = load_checkpoint(args.resume)
        done = int(meta.get("iterations_done", 0))
        if meta.get("weights") != list(weights.as_tuple()):
            raise RuntimeFailure(f"resume checkpoint was trained with weights {meta.get('weights')}, not {list(weights.as_tuple())}")
    try:
        base = pl.default_train_config(preset, weights=weights) if preset else pl.default_train_config("detection-action", weights=weights)
        cfg = replace(base, **train_over)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if cfg.positive_fraction is not None and weights.lambda_D == 0 and "positive_fraction" not in train_over:
        cfg = replace(cfg, positive_fraction=None)
    if not weights.trainable:
        raise UsageError("at least one task weight must be positive")
    run_cfg = replace(cfg, seed=cfg.seed + done)  # resumed segments draw fresh batches
    scenes = load_split(args.dataset, manifest, args.split)
    regions = pl.build_region_set(scenes, jitter=jitter, jitter_seed=cfg.seed, size=net.input_shape[1:])
    log.info("training on %d regions for %d iterations", len(regions), cfg.iterations)
    try:
        res = pl.train_on_regions(regions, run_cfg, net, params=params, log_every=args.log_every)
    except TrainingDiverged as exc:
        raise RuntimeFailure(f"training diverged: {exc}") from None
    meta = {
        "version": 1,
        "preset": preset,
        "weights": list(weights.as_tuple()),
        "train_config": cfg.to_dict(),
        "jitter": jitter,
        "dataset_hash": manifest["dataset_hash"],
        "split": args.split,
        "seed": cfg.seed,
        "iterations_done": done + cfg.iterations,
        "trace_summary": _trace_summary(res.trace),
    }
    save_checkpoint(args.out, res.params, net, meta)
    trace_path = args.trace or args.out + ".trace.jsonl"
    write_jsonl(trace_path, [
        {"version": RECORD_VERSION, "iteration": done + i + 1, **{k: float(res.trace[k][i]) for k in ("total", "det", "pose", "action")}}
        for i in range(cfg.iterations)
    ])
    print(f"checkpoint -> {args.out}; trace -> {trace_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

TASKS = ("apk", "action-cls", "det", "action-det")


def _require(cond: bool, message: str):
    if not cond:
        raise RuntimeFailure(message)


def evaluate_network(task, params, net, meta, train_scenes, val_scenes, rescore, context, nms, svm_cfg, object_seed):
    """Run one evaluation protocol with a trained network; returns ``(APResult, details)``."""
    lam_d, lam_p, lam_a = meta["weights"]
    size = net.input_shape[1:]
    details = {}
    if task == "det":
        V = pl.build_region_set(val_scenes, size=size)
        out = predict(params, net, V.inputs)
        if rescore:
            R = pl.build_region_set(train_scenes, size=size)
            model = pl.train_detection_svm(predict(params, net, R.inputs), R, svm_cfg)
            scores = pl.detection_svm_scores(model, out)
            preds = pl.detection_predictions_from_scores(scores, V, nms)
        else:
            _require(lam_d > 0, "task det needs a trained detection head (lambda_D > 0) or --rescore")
            preds = pl.detection_predictions(out, V, nms)
        return pl.evaluate_predictions("det", preds, val_scenes), details
    if task == "apk":
        _require(lam_p > 0, "task apk needs a trained pose head (lambda_P > 0)")
        R = pl.build_region_set(train_scenes, size=size)
        kp_cfg = replace(pl.KEYPOINT_SVM, seed=svm_cfg.seed)
        models = pl.train_keypoint_svms(predict(params, net, R.inputs), R, pl.ground_truth_table(train_scenes), kp_cfg)
        V = pl.build_region_set(val_scenes, size=size)
        preds = pl.keypoint_predictions(predict(params, net, V.inputs), V, models, nms_threshold=nms)
        return pl.evaluate_predictions("apk", preds, val_scenes), details
    if task == "action-cls":
        G = pl.build_region_set(val_scenes, proposals=False, ground_truth=True, size=size)
        out = predict(params, net, G.inputs)
        Gt = Rt = None
        if rescore or context:
            Gt = pl.build_region_set(train_scenes, proposals=False, ground_truth=True, size=size)
            out_t = predict(params, net, Gt.inputs)
        if rescore:
            models = pl.train_action_svms(out_t, Gt, svm_cfg, background=False)
            scores = pl.action_classification_scores(out, models)
        else:
            _require(lam_a > 0, "task action-cls needs a trained action head (lambda_A > 0) or --rescore")
            scores = pl.action_classification_scores(out)
        if context:
            scores_t = pl.action_classification_scores(out_t, models if rescore else None)
            ctx_t = pl.context_features(scores_t, Gt, pl.object_detection_table(train_scenes, object_seed))
            rescorers = pl.fit_context_rescorer(ctx_t, pl.true_actions(Gt, train_scenes), svm_cfg)
            ctx = pl.context_features(scores, G, pl.object_detection_table(val_scenes, object_seed))
            scores = pl.apply_context_rescorer(ctx, rescorers)
        return evaluate_action_classification(pl.true_actions(G, val_scenes), scores), details
    if task == "action-det":
        V = pl.build_region_set(val_scenes, size=size)
        out = predict(params, net, V.inputs)
        if rescore:
            Gt = pl.build_region_set(train_scenes, proposals=False, ground_truth=True, size=size)
            models = pl.train_action_svms(predict(params, net, Gt.inputs), Gt, svm_cfg, background=False)
            scores = pl.action_classification_scores(out, models)
        else:
            _require(lam_d > 0 and lam_a > 0, "task action-det needs trained detection and action heads or --rescore")
            scores = pl.product_scores(out)
        preds = pl.action_detection_predictions(scores, V, nms)
        return pl.evaluate_predictions("action-det", preds, val_scenes), details
    raise UsageError(f"unknown task {task!r}")


def evaluate_prediction_file(task, path, val_scenes, nms):
    if task == "action-cls":
        true, scores = classification_scores_from_records(read_jsonl(path), pl.ground_truth_table(val_scenes))
        return evaluate_action_classification(true, scores)
    preds = read_predictions(path, task)
    if nms is not None and task in ("det", "action-det"):
        preds = nms_predictions(preds, nms)
    return pl.evaluate_predictions(task, preds, val_scenes)


def cmd_evaluate(args) -> int:
    if args.checkpoint is None and args.predictions_file is None:
        raise UsageError("give --checkpoint or --predictions-file")
    if args.context and args.task != "action-cls":
        raise UsageError("--context applies to the action-cls task only")
    if args.nms_threshold is not None and not 0 < args.nms_threshold <= 1:
        raise UsageError("--nms-threshold must lie in (0, 1]")
    manifest = load_manifest(args.dataset)
    val = load_split(args.dataset, manifest, args.split)
    svm_cfg = pl.SvmConfig(seed=args.seed)
    config = {
        "task": args.task,
        "split": args.split,
        "rescore": bool(args.rescore),
        "context": bool(args.context),
        "seed": args.seed,
    }
    loss_trace = None
    label = args.label
    try:
        if args.predictions_file:
            config["predictions_sha256"] = file_sha256(args.predictions_file)
            config["nms_threshold"] = args.nms_threshold
            result = evaluate_prediction_file(args.task, args.predictions_file, val, args.nms_threshold)
            label = label or "predictions"
        else:
            params, net, meta = load_checkpoint(args.checkpoint)
            if meta.get("dataset_hash") not in (None, manifest["dataset_hash"]):
                log.warning("checkpoint was trained on dataset %s, evaluating on %s", meta["dataset_hash"], manifest["dataset_hash"])
            nms = 0.3 if args.nms_threshold is None else args.nms_threshold
            config.update(
                nms_threshold=nms,
                checkpoint_sha256=file_sha256(args.checkpoint),
                network=net.to_dict(),
                train=meta.get("train_config"),
                weights=meta.get("weights"),
                svm=asdict(svm_cfg),
                train_split=args.train_split,
            )
            train = load_split(args.dataset, manifest, args.train_split) if (args.rescore or args.context or args.task == "apk") else []
            result, _ = evaluate_network(args.task, params, net, meta, train, val, args.rescore, args.context, nms, svm_cfg, args.seed)
            loss_trace = meta.get("trace_summary")
            label = label or meta.get("preset") or "lambdas " + " ".join(f"{w:g}" for w in meta["weights"])
    except (KeyError, ValueError) as exc:
        raise RuntimeFailure(f"evaluation failed: {exc}") from None
    report = Report(args.task, result, manifest["dataset_hash"], config, args.seed, label, loss_trace)
    write_jsonl(args.out + ".jsonl", report.records())
    with open(args.out + ".txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_table(report))
    sys.stdout.write(report_table(report))
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(load_report(path))
        except OSError as exc:
            raise UsageError(f"cannot read report: {exc}") from None
        except (ValueError, KeyError) as exc:
            raise RuntimeFailure(f"malformed report {path}: {exc}") from None
    first = reports[0]
    for path, r in zip(args.reports[1:], reports[1:]):
        if r.header["dataset_hash"] != first.header["dataset_hash"]:
            raise RuntimeFailure(
                f"dataset hash mismatch: {args.reports[0]} has {first.header['dataset_hash']}, "
                f"{path} has {r.header['dataset_hash']}"
            )
        if r.header["task"] != first.header["task"] or r.names != first.names:
            raise RuntimeFailure(f"task mismatch: {args.reports[0]} is {first.header['task']}, {path} is {r.header['task']}")
    task = first.header["task"]
    title = {"apk": "APK [alpha=0.2]"}.get(task, "AP (%)")
    table = format_table([(r.label, r.ap, r.mean) for r in reports], first.names, title)
    merged = [{
        "record": "merged",
        "version": RECORD_VERSION,
        "task": task,
        "dataset_hash": first.header["dataset_hash"],
        "names": list(first.names),
    }]
    for r in reports:
        merged.append({
            "record": "row",
            "version": RECORD_VERSION,
            "label": r.label,
            "config_hash": r.header["config_hash"],
            "seed": r.header["seed"],
            "ap": [float(v) for v in r.ap],
            "map": r.mean,
        })
    with open(args.out + ".txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    write_jsonl(args.out + ".jsonl", merged)
    with open(args.out + ".curves.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label\tclass\trecall\tprecision\n")
        for r in reports:
            for name in r.names:
                rec, prec = r.curves.get(name, ([], []))
                for a, b in zip(rec, prec):
                    fh.write(f"{r.label}\t{name}\t{a!r}\t{b!r}\n")
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtrcnn", description="Multitask region CNN experiments on synthetic scenes.")
    p.add_argument("--threads", type=int, default=None, help=f"worker/BLAS threads (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("config", help="generation config (JSON)")
    g.add_argument("output", help="dataset directory to create")
    g.add_argument("--force", action="store_true", help="replace an existing output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--preset", choices=sorted(pl.PRESETS))
    t.add_argument("--lambdas", type=float, nargs=3, metavar=("D", "P", "A"))
    t.add_argument("--config", help="training config (JSON)")
    t.add_argument("--split", default="train")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--jitter", type=int, help="jittered boxes per training person")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--trace", help="loss trace path (default: <out>.trace.jsonl)")
    t.add_argument("--log-every", dest="log_every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint or a predictions file")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--task", required=True, choices=TASKS)
    e.add_argument("--out", required=True, help="report path prefix (.jsonl and .txt)")
    e.add_argument("--split", default="val")
    e.add_argument("--train-split", dest="train_split", default="train", help="split used to fit SVMs")
    e.add_argument("--rescore", action="store_true", help="score with SVMs on network features")
    e.add_argument("--context", action="store_true", help="context rescoring of action scores")
    e.add_argument("--nms-threshold", dest="nms_threshold", type=float)
    e.add_argument("--predictions-file", dest="predictions_file")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--label")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge evaluation reports")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", required=True, help="output prefix (.txt, .jsonl, .curves.tsv)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    try:
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        args.threads = threads
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"mtrcnn: error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"mtrcnn: failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
