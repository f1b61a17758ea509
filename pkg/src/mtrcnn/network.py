"""Small shared-trunk convolutional network with detection, pose and action heads.

Layout: conv stack -> fc6 -> fc7 -> three linear heads. Convolutions run in NHWC
with an im2col formulation; everything is float64.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import NUM_KEYPOINTS
from .labeling import NUM_ACTIONS, DetLabel, RegionSample
from .losses import BatchTargets, HeadOutputs, TaskWeights, batch_loss_total, softmax

log = logging.getLogger(__name__)

HEADS = ("det", "pose", "action")


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 2
    nonlinearity: str = "relu"


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple = (3, 24, 24)
    conv: tuple = (ConvSpec(8), ConvSpec(16), ConvSpec(32))
    fc_widths: tuple = (64, 64)
    num_keypoints: int = NUM_KEYPOINTS
    num_actions: int = NUM_ACTIONS
    head_from: str = "fc7"
    fc_nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(
            self, "conv", tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv)
        )
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"bad input_shape {self.input_shape}")
        if len(self.fc_widths) != 2:
            raise ValueError("exactly two shared fully-connected layers (fc6, fc7) are supported")
        if self.head_from not in ("fc6", "fc7"):
            raise ValueError("head_from must be 'fc6' or 'fc7'")
        for c in self.conv:
            if c.channels <= 0 or c.kernel <= 0 or c.stride <= 0:
                raise ValueError(f"bad conv spec {c}")
            if c.nonlinearity not in _ACT:
                raise ValueError(f"unknown nonlinearity {c.nonlinearity}")
        if min(self.fc_widths) <= 0 or self.num_keypoints <= 0 or self.num_actions <= 0:
            raise ValueError("dimensions must be positive")

    @property
    def head_sizes(self) -> dict:
        return {"det": 2, "pose": 2 * self.num_keypoints, "action": self.num_actions}

    def conv_output_shapes(self) -> list:
        c, h, w = self.input_shape
        shapes = []
        for spec in self.conv:
            pad = spec.kernel // 2
            h = (h + 2 * pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * pad - spec.kernel) // spec.stride + 1
            if h <= 0 or w <= 0:
                raise ValueError("conv stack shrinks the input to nothing")
            c = spec.channels
            shapes.append((h, w, c))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["conv"] = tuple(ConvSpec(**c) for c in d.get("conv", ()))
        return cls(**d)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACT = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def param_shapes(config: NetworkConfig) -> dict:
    shapes = {}
    cin = config.input_shape[0]
    for i, spec in enumerate(config.conv):
        shapes[f"conv{i + 1}.W"] = (spec.kernel, spec.kernel, cin, spec.channels)
        shapes[f"conv{i + 1}.b"] = (spec.channels,)
        cin = spec.channels
    h, w, c = config.conv_output_shapes()[-1] if config.conv else config.input_shape[1:] + config.input_shape[:1]
    fan = h * w * c
    for name, width in zip(("fc6", "fc7"), config.fc_widths):
        shapes[f"{name}.W"] = (fan, width)
        shapes[f"{name}.b"] = (width,)
        fan = width
    head_in = config.fc_widths[0] if config.head_from == "fc6" else config.fc_widths[1]
    for head, size in config.head_sizes.items():
        shapes[f"{head}.W"] = (head_in, size)
        shapes[f"{head}.b"] = (size,)
    return shapes


def head_param_names(head: str) -> tuple:
    return (f"{head}.W", f"{head}.b")


def init_params(config: NetworkConfig, seed: int = 0, scale: float = 1.0) -> dict:
    """He-normal hidden layers, fan-in scaled heads, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 1.0 if name.split(".")[0] in HEADS else 2.0
        params[name] = scale * rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
    return params


def zero_params(config: NetworkConfig) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


def _im2col(x, k, stride):
    """(B, H, W, C) padded input -> (B, Ho, Wo, k*k*C) patches, (kh, kw, c) ordering."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Ho, Wo, C, k, k)
    b, ho, wo = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, -1), ho, wo


def _conv_forward(x, W, bias, stride):
    k = W.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols, ho, wo = _im2col(xp, k, stride)
    out = cols.reshape(-1, cols.shape[-1]) @ W.reshape(-1, W.shape[-1]) + bias
    return out.reshape(x.shape[0], ho, wo, -1), cols, xp.shape


def _conv_backward(dout, cols, W, xp_shape, stride, need_dx=True):
    k, _, cin, cout = W.shape
    pad = k // 2
    b, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dW = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return dW, db, None
    dcols = (d2 @ W.reshape(-1, cout).T).reshape(b, ho, wo, k, k, cin)
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    hp, wp = xp_shape[1], xp_shape[2]
    return dW, db, dxp[:, pad : hp - pad, pad : wp - pad, :]


def _as_batch(config: NetworkConfig, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != config.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match config {config.input_shape}")
    return x.transpose(0, 2, 3, 1), single


def _forward(params, config: NetworkConfig, x):
    """Batched NHWC forward; returns logits/coords and the cache for backward."""
    cache = {"conv": []}
    h = x
    for i, spec in enumerate(config.conv):
        act, _ = _ACT[spec.nonlinearity]
        z, cols, xp_shape = _conv_forward(h, params[f"conv{i + 1}.W"], params[f"conv{i + 1}.b"], spec.stride)
        a = act(z)
        cache["conv"].append((z, a, cols, xp_shape))
        h = a
    flat = h.reshape(h.shape[0], -1)
    cache["flat"] = flat
    cache["conv_out_shape"] = h.shape
    act, _ = _ACT[config.fc_nonlinearity]
    z6 = flat @ params["fc6.W"] + params["fc6.b"]
    a6 = act(z6)
    z7 = a6 @ params["fc7.W"] + params["fc7.b"]
    a7 = act(z7)
    cache.update(z6=z6, a6=a6, z7=z7, a7=a7)
    hin = a7 if config.head_from == "fc7" else a6
    cache["head_in"] = hin
    heads = {head: hin @ params[f"{head}.W"] + params[f"{head}.b"] for head in HEADS}
    return heads, cache


def forward(params: dict, config: NetworkConfig, region_tensor) -> HeadOutputs:
    """Run the network on one ``(C, H, W)`` tensor or a ``(B, C, H, W)`` batch."""
    x, single = _as_batch(config, region_tensor)
    heads, cache = _forward(params, config, x)
    out = HeadOutputs(
        det_probs=softmax(heads["det"]),
        pose_coords=heads["pose"],
        action_probs=softmax(heads["action"]),
        features={"fc6": cache["a6"], "fc7": cache["a7"]},
    )
    return out[0] if single else out


def _backward(params, config: NetworkConfig, cache, dheads: dict) -> dict:
    grads = {}
    hin = cache["head_in"]
    dh = np.zeros_like(hin)
    for head in HEADS:
        g = dheads[head]
        grads[f"{head}.W"] = hin.T @ g
        grads[f"{head}.b"] = g.sum(axis=0)
        if np.any(g):
            dh += g @ params[f"{head}.W"].T
    _, dact = _ACT[config.fc_nonlinearity]
    if config.head_from == "fc7":
        dz7 = dh * dact(cache["z7"], cache["a7"])
        grads["fc7.W"] = cache["a6"].T @ dz7
        grads["fc7.b"] = dz7.sum(axis=0)
        da6 = dz7 @ params["fc7.W"].T
    else:
        grads["fc7.W"] = np.zeros_like(params["fc7.W"])
        grads["fc7.b"] = np.zeros_like(params["fc7.b"])
        da6 = dh
    dz6 = da6 * dact(cache["z6"], cache["a6"])
    grads["fc6.W"] = cache["flat"].T @ dz6
    grads["fc6.b"] = dz6.sum(axis=0)
    dflat = dz6 @ params["fc6.W"].T
    d = dflat.reshape(cache["conv_out_shape"])
    for i in reversed(range(len(config.conv))):
        spec = config.conv[i]
        z, a, cols, xp_shape = cache["conv"][i]
        dz = d * _ACT[spec.nonlinearity][1](z, a)
        dW, db, d = _conv_backward(dz, cols, params[f"conv{i + 1}.W"], xp_shape, spec.stride, need_dx=i > 0)
        grads[f"conv{i + 1}.W"] = dW
        grads[f"conv{i + 1}.b"] = db
    return grads


def loss_and_grads(params: dict, config: NetworkConfig, x, targets: BatchTargets, w: TaskWeights):
    """Batch-mean weighted loss and its gradient for every parameter.

    ``x`` is ``(B, C, H, W)``. Returns ``(total, parts, grads)``.
    """
    xb, _ = _as_batch(config, x)
    heads, cache = _forward(params, config, xb)
    total, parts, dheads = batch_loss_total(
        softmax(heads["det"]), heads["pose"], softmax(heads["action"]), targets, w
    )
    if not w.trainable:
        return total, parts, {k: np.zeros_like(v) for k, v in params.items()}
    return total, parts, _backward(params, config, cache, dheads)


def backward(params: dict, config: NetworkConfig, region_tensor, sample: RegionSample, w: TaskWeights) -> dict:
    """Gradient of the single-sample weighted loss with respect to every parameter."""
    x = np.asarray(region_tensor, dtype=np.float64)
    targets = BatchTargets.from_samples([sample], config.num_keypoints)
    _, _, grads = loss_and_grads(params, config, x[None], targets, w)
    return grads


def score_action_detection(outputs: HeadOutputs, mode: str = "product") -> np.ndarray:
    """Per-action scores for a region: ``p_person * p_action`` or ``p_action`` alone."""
    probs = np.asarray(outputs.action_probs)
    if mode == "product":
        return np.asarray(outputs.det_probs)[..., 1:2] * probs
    if mode == "action":
        return probs.copy()
    raise ValueError(f"unknown scoring mode {mode!r}")


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    iterations: int = 2000
    weights: TaskWeights = field(default_factory=TaskWeights)
    seed: int = 0
    positive_fraction: Optional[float] = 0.25
    lr_decay_every: Optional[int] = None
    lr_decay: float = 0.1
    max_loss: float = 1e6

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", TaskWeights(**self.weights))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.positive_fraction is not None and not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


class RegionDataset:
    """Region inputs plus their labels.

    ``inputs`` is anything indexable by an integer array that yields ``(B, C, H, W)``
    float arrays, e.g. a numpy array or a lazy crop renderer.
    """

    def __init__(self, inputs, samples: Sequence[RegionSample], num_keypoints: int = NUM_KEYPOINTS):
        if len(inputs) != len(samples):
            raise ValueError("inputs and samples differ in length")
        self.inputs = inputs
        self.samples = list(samples)
        self.targets = BatchTargets.from_samples(self.samples, num_keypoints)
        self.positive = np.array(
            [s.det_label == DetLabel.POSITIVE for s in self.samples], dtype=bool
        )

    @classmethod
    def from_pairs(cls, pairs, num_keypoints: int = NUM_KEYPOINTS) -> "RegionDataset":
        tensors, samples = zip(*pairs)
        return cls(np.stack([np.asarray(t, dtype=np.float64) for t in tensors]), samples, num_keypoints)

    def __len__(self):
        return len(self.samples)

    def batch(self, idx):
        idx = np.asarray(idx)
        return np.asarray(self.inputs[idx], dtype=np.float64), self.targets.take(idx)


class _Cycler:
    """Endless reshuffled pass over an index pool."""

    def __init__(self, pool, rng):
        self.pool = np.asarray(pool)
        self.rng = rng
        self.order = self.rng.permutation(self.pool)
        self.pos = 0

    def take(self, n):
        out = []
        while n > 0:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
            m = min(n, len(self.order) - self.pos)
            out.append(self.order[self.pos : self.pos + m])
            self.pos += m
            n -= m
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    params: dict
    trace: dict  # keys total, det, pose, action -> (iterations,) arrays
    config: NetworkConfig
    train_config: TrainConfig


def train(
    dataset: RegionDataset,
    net_config: NetworkConfig,
    cfg: TrainConfig,
    params: Optional[dict] = None,
    log_every: int = 0,
) -> TrainResult:
    """Minibatch SGD with momentum on the weighted multitask loss.

    With ``positive_fraction`` set, each batch holds that share of detection-positive
    regions, the rest drawn from the remaining regions; otherwise batches are plain
    shuffled passes. Deterministic for a fixed seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(net_config, seed=cfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    pos_idx = np.nonzero(dataset.positive)[0]
    neg_idx = np.nonzero(~dataset.positive)[0]
    if cfg.positive_fraction is None or len(pos_idx) == 0 or len(neg_idx) == 0:
        n_pos = 0
        pos_c = None
        neg_c = _Cycler(np.arange(len(dataset)), rng)
    else:
        n_pos = int(round(cfg.positive_fraction * cfg.batch_size))
        pos_c = _Cycler(pos_idx, rng)
        neg_c = _Cycler(neg_idx, rng)

    trace = {k: np.zeros(cfg.iterations) for k in ("total", "det", "pose", "action")}
    frozen = [h for h, lam in zip(HEADS, cfg.weights.as_tuple()) if lam == 0]
    lr = cfg.learning_rate
    for it in range(cfg.iterations):
        if cfg.lr_decay_every and it > 0 and it % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay
        parts_idx = []
        if pos_c is not None and n_pos > 0:
            parts_idx.append(pos_c.take(n_pos))
        if cfg.batch_size - n_pos > 0:
            parts_idx.append(neg_c.take(cfg.batch_size - n_pos))
        idx = np.concatenate(parts_idx)
        x, targets = dataset.batch(idx)
        total, parts, grads = loss_and_grads(params, net_config, x, targets, cfg.weights)
        if not np.isfinite(total) or total > cfg.max_loss:
            raise TrainingDiverged(f"loss {total!r} at iteration {it}")
        trace["total"][it] = total
        for k, v in parts.items():
            trace[k][it] = v
        for name in params:
            if name.split(".")[0] in frozen:
                continue
            velocity[name] *= cfg.momentum
            velocity[name] -= lr * grads[name]
            params[name] += velocity[name]
        if log_every and (it + 1) % log_every == 0:
            log.info(
                "iter %d loss %.4f (det %.4f pose %.4f action %.4f)",
                it + 1, total, parts["det"], parts["pose"], parts["action"],
            )
    return TrainResult(params, trace, net_config, cfg)


def predict(params: dict, config: NetworkConfig, inputs, batch_size: int = 256) -> HeadOutputs:
    """Forward over a large indexable input collection in chunks."""
    n = len(inputs)
    if n == 0:
        c = config
        return HeadOutputs(
            np.zeros((0, 2)), np.zeros((0, 2 * c.num_keypoints)), np.zeros((0, c.num_actions)),
            {"fc6": np.zeros((0, c.fc_widths[0])), "fc7": np.zeros((0, c.fc_widths[1]))},
        )
    chunks = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        chunks.append(forward(params, config, np.asarray(inputs[idx], dtype=np.float64)))
    return HeadOutputs(
        np.concatenate([c.det_probs for c in chunks]),
        np.concatenate([c.pose_coords for c in chunks]),
        np.concatenate([c.action_probs for c in chunks]),
        {k: np.concatenate([c.features[k] for c in chunks]) for k in ("fc6", "fc7")},
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MTRCNNCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, config: NetworkConfig, meta: Optional[dict] = None) -> None:
    """Binary container: magic, version, JSON header length, JSON header, little-endian f64 tensors."""
    names = list(param_shapes(config))
    header = {
        "config": config.to_dict(),
        "tensors": [[n, list(params[n].shape)] for n in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, config, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    config = NetworkConfig.from_dict(header["config"])
    params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params, config, header["meta"]
