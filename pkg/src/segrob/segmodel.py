"""Small differentiable per-point segmenter.

Pipeline: per-point MLP(6 -> H -> H) on [coords || color], then each point
concatenates its own feature with the elementwise max over its k_agg
coordinate neighbors' features, then MLP(2H -> H -> C) to per-point logits.
Max aggregation (rather than mean) keeps the row-max subgradient on the
gradient path, which is what coordinate attacks exploit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Tape, Tensor, backward_grad
from .pointcloud import PointCloud, knn

NEIGHBOR_POLICIES = ("fixed", "recompute")

_WEIGHT_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


@dataclass(frozen=True)
class SegModel:
    hidden: int
    k_agg: int
    num_classes: int
    in_feats: int = 3
    neighbor_policy: str = "fixed"
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.neighbor_policy not in NEIGHBOR_POLICIES:
            raise ValueError(f"neighbor_policy must be one of {NEIGHBOR_POLICIES}")
        if self.hidden < 1 or self.k_agg < 1 or self.num_classes < 1:
            raise ValueError("hidden, k_agg and num_classes must be positive")
        if set(self.weights) != set(_WEIGHT_NAMES):
            raise ValueError(f"weights must hold exactly {_WEIGHT_NAMES}")
        frozen = {}
        for name, arr in self.weights.items():
            arr = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"weight {name} holds non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "weights", frozen)

    def with_weights(self, weights: dict) -> "SegModel":
        return replace(self, weights=dict(weights))


def init_model(hidden: int = 64, k_agg: int = 8, num_classes: int = 6,
               in_feats: int = 3, neighbor_policy: str = "fixed",
               seed: int = 0) -> SegModel:
    """Fresh model with 1/sqrt(fan_in) Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    d_in = 3 + in_feats

    def layer(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))

    weights = {
        "w1": layer(d_in, hidden), "b1": np.zeros(hidden),
        "w2": layer(hidden, hidden), "b2": np.zeros(hidden),
        "w3": layer(2 * hidden, hidden), "b3": np.zeros(hidden),
        "w4": layer(hidden, num_classes), "b4": np.zeros(num_classes),
    }
    return SegModel(hidden, k_agg, num_classes, in_feats, neighbor_policy, weights)


def forward_graph(tape: Tape, model: SegModel, coords_t: Tensor,
                  feats_t: Tensor, neighbor_idx: np.ndarray,
                  weight_tensors: dict | None = None) -> Tensor:
    """Build the logit graph on an existing tape; neighbor indices are
    constants of differentiation."""
    w = weight_tensors or {k: Tensor(v) for k, v in model.weights.items()}
    x = tape.concat_cols(coords_t, feats_t)
    h = tape.relu(tape.add_bias(tape.matmul(x, w["w1"]), w["b1"]))
    h = tape.relu(tape.add_bias(tape.matmul(h, w["w2"]), w["b2"]))
    agg = tape.neighbor_max(h, neighbor_idx)
    cat = tape.concat_cols(h, agg)
    h2 = tape.relu(tape.add_bias(tape.matmul(cat, w["w3"]), w["b3"]))
    return tape.add_bias(tape.matmul(h2, w["w4"]), w["b4"])


def _check_cloud(model: SegModel, cloud: PointCloud):
    if cloud.n_points <= model.k_agg:
        raise ValueError(f"cloud needs more than k_agg={model.k_agg} points")
    if cloud.feats.shape[1] != model.in_feats:
        raise ValueError(f"model expects {model.in_feats} features, cloud has "
                         f"{cloud.feats.shape[1]}")


def forward(model: SegModel, cloud: PointCloud,
            neighbor_idx: np.ndarray | None = None) -> np.ndarray:
    """Per-point logits (N, C). Neighbors are taken from the cloud's own
    coordinates unless an index matrix is supplied."""
    _check_cloud(model, cloud)
    if neighbor_idx is None:
        neighbor_idx = knn(cloud.coords, model.k_agg)
    tape = Tape()
    logits = forward_graph(tape, model, Tensor(cloud.coords), Tensor(cloud.feats),
                           neighbor_idx)
    return np.asarray(logits.data)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lower class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be (N, C)")
    return np.argmax(logits, axis=1).astype(np.int64)


def predict(model: SegModel, cloud: PointCloud) -> np.ndarray:
    return predict_labels(forward(model, cloud))


def input_grad(model: SegModel, cloud: PointCloud, loss_builder,
               fields: str = "color",
               neighbor_idx: np.ndarray | None = None) -> dict:
    """Gradient of a scalar loss w.r.t. the cloud's input fields.

    `loss_builder(tape, logits)` must return a scalar Tensor. Returns a
    dict with keys among {"color", "coords"}; only selected fields appear.
    """
    if fields not in ("color", "coords", "both"):
        raise ValueError(f"unknown fields {fields!r}")
    _check_cloud(model, cloud)
    if neighbor_idx is None:
        neighbor_idx = knn(cloud.coords, model.k_agg)
    tape = Tape()
    ct, ft = Tensor(cloud.coords), Tensor(cloud.feats)
    logits = forward_graph(tape, model, ct, ft, neighbor_idx)
    loss = loss_builder(tape, logits)
    wrt = {}
    if fields in ("color", "both"):
        wrt["color"] = ft
    if fields in ("coords", "both"):
        wrt["coords"] = ct
    return backward_grad(tape, loss, wrt)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")


class AdamState:
    """Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, shapes: dict):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def train(model: SegModel, scenes, cfg: TrainConfig = TrainConfig()):
    """Cross-entropy training over labeled scenes.

    Scenes are shuffled each epoch; gradients are averaged over
    `batch_size` scenes per optimizer step. Returns (trained model,
    per-epoch mean loss history). Deterministic given cfg.seed.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no training scenes")
    for s in scenes:
        if s.labels is None:
            raise ValueError("training scenes must be labeled")
        if s.num_classes != model.num_classes:
            raise ValueError("scene/model class count mismatch")
        _check_cloud(model, s)
    params = {k: v.copy() for k, v in model.weights.items()}
    if cfg.epochs == 0:
        return model.with_weights(params), []
    rng = np.random.default_rng(cfg.seed)
    neighbor_cache = [knn(s.coords, model.k_agg) for s in scenes]
    adam = AdamState({k: v.shape for k, v in params.items()})
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for si in batch:
                scene = scenes[si]
                tape = Tape()
                wt = {k: Tensor(v) for k, v in params.items()}
                logits = forward_graph(tape, model, Tensor(scene.coords),
                                       Tensor(scene.feats), neighbor_cache[si],
                                       weight_tensors=wt)
                loss = tape.softmax_cross_entropy(logits, scene.labels)
                grads = backward_grad(tape, loss, wt)
                losses.append(loss.item())
                for k in acc:
                    acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            adam.step(params, acc, cfg.lr)
        history.append(float(np.mean(losses)))
    return model.with_weights(params), history


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = "segrob-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(model: SegModel, path) -> None:
    """One JSON header line with the architecture constants, then the
    weight arrays as a raw npy stream. Byte-identical across reruns."""
    meta = {
        "format": _CKPT_MAGIC, "version": _CKPT_VERSION,
        "hidden": model.hidden, "k_agg": model.k_agg,
        "num_classes": model.num_classes, "in_feats": model.in_feats,
        "neighbor_policy": model.neighbor_policy,
        "arrays": list(_WEIGHT_NAMES),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for name in _WEIGHT_NAMES:
            np.lib.format.write_array(fh, model.weights[name], version=(1, 0))


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        try:
            meta = json.loads(header)
        except json.JSONDecodeError:
            raise ValueError(f"{path}: not a checkpoint") from None
        if meta.get("format") != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if meta.get("version") != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        weights = {name: np.lib.format.read_array(fh) for name in meta["arrays"]}
    return SegModel(meta["hidden"], meta["k_agg"], meta["num_classes"],
                    meta["in_feats"], meta["neighbor_policy"], weights)
