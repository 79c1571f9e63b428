"""Desk-scale differentiable network and training loop.

The network is a plain-numpy MLP: an encoder maps a flattened downsampled
patch to a 128-d representation R, a two-layer projection head maps R to a
64-d embedding Z for the contrastive loss, and a classification head (two
128-wide ReLU layers with dropout) maps R to class logits. Backpropagation
is hand-written and cross-checked against finite differences in the tests.

Four training schemes are supported: joint (contrastive + CE together),
ce_only, and contrastive pretraining followed by CE fine-tuning with the
encoder either frozen (cl_detached) or trainable (cl_attached).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment, lossmath, uncert

MODES = ("joint", "ce_only", "cl_detached", "cl_attached")
DROPOUT_RATE = 0.25

CHECKPOINT_MAGIC = b"FFM1"


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (empty data, divergence, ...)."""


@dataclass(frozen=True)
class Architecture:
    """Layer sizes; the classifier consumes R, not Z."""

    input_hw: int = 32
    channels: int = 3
    encoder_hidden: int = 256
    repr_dim: int = 128
    proj_hidden: int = 64
    proj_dim: int = 64
    clf_hidden: int = 128
    n_classes: int = 3
    dropout: float = DROPOUT_RATE

    @property
    def input_dim(self) -> int:
        return self.input_hw * self.input_hw * self.channels

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        d = self.input_dim
        return [
            ("enc1_w", (d, self.encoder_hidden)),
            ("enc1_b", (self.encoder_hidden,)),
            ("enc2_w", (self.encoder_hidden, self.repr_dim)),
            ("enc2_b", (self.repr_dim,)),
            ("proj1_w", (self.repr_dim, self.proj_hidden)),
            ("proj1_b", (self.proj_hidden,)),
            ("proj2_w", (self.proj_hidden, self.proj_dim)),
            ("proj2_b", (self.proj_dim,)),
            ("clf1_w", (self.repr_dim, self.clf_hidden)),
            ("clf1_b", (self.clf_hidden,)),
            ("clf2_w", (self.clf_hidden, self.clf_hidden)),
            ("clf2_b", (self.clf_hidden,)),
            ("clf3_w", (self.clf_hidden, self.n_classes)),
            ("clf3_b", (self.n_classes,)),
        ]


ENCODER_PARAMS = ("enc1_w", "enc1_b", "enc2_w", "enc2_b")
PROJECTOR_PARAMS = ("proj1_w", "proj1_b", "proj2_w", "proj2_b")
CLASSIFIER_PARAMS = ("clf1_w", "clf1_b", "clf2_w", "clf2_b", "clf3_w", "clf3_b")


@dataclass
class TrainConfig:
    mode: str = "joint"
    preset: str = "heavy"
    epochs: int = 40
    batch_size: int = 128
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    warmup_steps: float = 5.0  # counted in epochs
    cycle_epochs: float = 25.0
    momentum: float = 0.9
    seed: int = 0
    pretrain_epochs: int | None = None  # two-phase modes; default epochs // 2
    loss: lossmath.LossConfig = field(default_factory=lossmath.LossConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}")
        if self.lr_min >= self.lr_max:
            raise TrainingError("lr_min must be below lr_max")
        if self.mode != "ce_only" and self.batch_size < 2:
            raise TrainingError("contrastive modes need batch size >= 2")


def init_params(arch: Architecture, rng: np.random.Generator) -> dict:
    """He-normal weight init, zero biases, float64 throughout."""
    params = {}
    for name, shape in arch.layer_shapes():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[0]
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return params


def _relu(x):
    return np.maximum(x, 0.0)


def forward(
    params: dict,
    x: np.ndarray,
    arch: Architecture,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> dict:
    """Forward pass over a batch of flattened inputs.

    Returns R, Z, logits and the cache needed by :func:`backward`. Dropout
    (inverted, rate ``arch.dropout``) is active only when ``train`` is True;
    passing a seeded ``dropout_rng`` makes training batches reproducible.
    """
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise TrainingError(
            f"expected input of width {arch.input_dim}, got shape {x.shape}"
        )
    cache = {"x": x}

    h1 = x @ params["enc1_w"] + params["enc1_b"]
    a1 = _relu(h1)
    r = a1 @ params["enc2_w"] + params["enc2_b"]
    cache["enc_h1"], cache["enc_a1"], cache["r"] = h1, a1, r

    p1 = r @ params["proj1_w"] + params["proj1_b"]
    pa1 = _relu(p1)
    z = pa1 @ params["proj2_w"] + params["proj2_b"]
    cache["proj_h1"], cache["proj_a1"] = p1, pa1

    keep = 1.0 - arch.dropout
    c1 = r @ params["clf1_w"] + params["clf1_b"]
    ca1 = _relu(c1)
    if train and arch.dropout > 0:
        drng = dropout_rng if dropout_rng is not None else np.random.default_rng()
        m1 = (drng.random(ca1.shape) < keep) / keep
        ca1 = ca1 * m1
    else:
        m1 = None
    c2 = ca1 @ params["clf2_w"] + params["clf2_b"]
    ca2 = _relu(c2)
    if train and arch.dropout > 0:
        m2 = (drng.random(ca2.shape) < keep) / keep
        ca2 = ca2 * m2
    else:
        m2 = None
    logits = ca2 @ params["clf3_w"] + params["clf3_b"]
    cache.update(
        clf_h1=c1, clf_a1=ca1, clf_h2=c2, clf_a2=ca2, drop_m1=m1, drop_m2=m2
    )

    return {"r": r, "z": z, "logits": logits, "cache": cache}


def backward(
    params: dict,
    cache: dict,
    grad_z: np.ndarray | None,
    grad_logits: np.ndarray | None,
) -> dict:
    """Backpropagate loss gradients w.r.t. Z and/or logits to all parameters."""
    grads = {}
    grad_r = np.zeros_like(cache["r"])

    if grad_logits is not None:
        grads["clf3_w"] = cache["clf_a2"].T @ grad_logits
        grads["clf3_b"] = grad_logits.sum(axis=0)
        d = grad_logits @ params["clf3_w"].T
        if cache["drop_m2"] is not None:
            d = d * cache["drop_m2"]
        d = d * (cache["clf_h2"] > 0)
        grads["clf2_w"] = cache["clf_a1"].T @ d
        grads["clf2_b"] = d.sum(axis=0)
        d = d @ params["clf2_w"].T
        if cache["drop_m1"] is not None:
            d = d * cache["drop_m1"]
        d = d * (cache["clf_h1"] > 0)
        grads["clf1_w"] = cache["r"].T @ d
        grads["clf1_b"] = d.sum(axis=0)
        grad_r += d @ params["clf1_w"].T

    if grad_z is not None:
        grads["proj2_w"] = cache["proj_a1"].T @ grad_z
        grads["proj2_b"] = grad_z.sum(axis=0)
        d = grad_z @ params["proj2_w"].T
        d = d * (cache["proj_h1"] > 0)
        grads["proj1_w"] = cache["r"].T @ d
        grads["proj1_b"] = d.sum(axis=0)
        grad_r += d @ params["proj1_w"].T

    d = grad_r @ params["enc2_w"].T
    grads["enc2_w"] = cache["enc_a1"].T @ grad_r
    grads["enc2_b"] = grad_r.sum(axis=0)
    d = d * (cache["enc_h1"] > 0)
    grads["enc1_w"] = cache["x"].T @ d
    grads["enc1_b"] = d.sum(axis=0)
    return grads


def lr_at(step: float, config: TrainConfig) -> float:
    """Warmup-then-cosine schedule, evaluated in epoch units.

    Linear ramp 0 -> lr_max over the warmup, then a cosine cycle from lr_max
    down to lr_min over ``cycle_epochs``, restarting afterwards. Exact cycle
    multiples report lr_min (the end of the completed cycle).
    """
    if step < 0:
        raise TrainingError("step must be nonnegative")
    w = config.warmup_steps
    if step < w:
        return config.lr_max * step / w
    t = (step - w) % config.cycle_epochs
    if t == 0 and step > w:
        t = config.cycle_epochs
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (
        1 + math.cos(math.pi * t / config.cycle_epochs)
    )


# ---------------------------------------------------------------------------
# data handling


@dataclass
class Sample:
    id: str
    pixels: np.ndarray  # H x W x 3 in [0,1]
    label: int
    n_green: int


CLASS_TO_INDEX = {"normal": 0, "gain": 1, "amplified": 2}


def load_dataset(manifest_path) -> list[Sample]:
    """Read patches referenced by a generation manifest into memory."""
    from .synthgen import read_manifest

    root = Path(manifest_path).parent
    samples = []
    for entry in read_manifest(manifest_path):
        arr = np.asarray(Image.open(root / entry["file"]).convert("RGB"))
        samples.append(
            Sample(
                id=entry["id"],
                pixels=arr.astype(np.float64) / 255.0,
                label=CLASS_TO_INDEX[entry["class_id"]],
                n_green=int(entry["n_green"]),
            )
        )
    if not samples:
        raise TrainingError(f"empty dataset at {manifest_path}")
    return samples


def downsample(pixels: np.ndarray, target_hw: int) -> np.ndarray:
    """Area-average downsampling; preserves total signal mass per channel."""
    h, w, c = pixels.shape
    if h % target_hw or w % target_hw:
        raise TrainingError(f"patch size {h}x{w} not divisible by {target_hw}")
    fh, fw = h // target_hw, w // target_hw
    return pixels.reshape(target_hw, fh, target_hw, fw, c).mean(axis=(1, 3))


# fixed affine normalization: patches are mostly dark, so recenter around the
# typical pixel level to keep early-layer activations in a useful range
INPUT_SHIFT = 0.25
INPUT_SCALE = 4.0


def to_input(pixels: np.ndarray, arch: Architecture) -> np.ndarray:
    x = downsample(pixels, arch.input_hw).reshape(-1)
    return (x - INPUT_SHIFT) * INPUT_SCALE


def split_dataset(
    samples: list[Sample], rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Deterministic shuffled train/val/test split."""
    order = rng.permutation(len(samples))
    n = len(samples)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    shuffled = [samples[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# training


def _sgd_step(params, grads, velocity, lr, momentum, trainable):
    for name in trainable:
        if name not in grads:
            continue
        velocity[name] = momentum * velocity[name] - lr * grads[name]
        params[name] += velocity[name]


def _accuracy_and_loss(params, arch, samples, cfg):
    xs = np.stack([to_input(s.pixels, arch) for s in samples])
    labels = np.array([s.label for s in samples])
    out = forward(params, xs, arch, train=False)
    probs = lossmath.softmax(out["logits"])
    preds = probs.argmax(axis=1)
    acc = float((preds == labels).mean())
    ce = 0.0
    for i, lab in enumerate(labels):
        target = lossmath.smoothed_targets(int(lab), cfg.loss.alpha, arch.n_classes)
        li, _ = lossmath.cross_entropy(probs[i], target)
        ce += li
    return acc, ce / len(samples)


def train(
    samples: list[Sample],
    config: TrainConfig,
    arch: Architecture | None = None,
    log_fn=None,
) -> tuple[dict, list[dict]]:
    """Train a network on an in-memory dataset; returns (checkpoint, log).

    The dataset is split 60/20/20; augmentation, batching, dropout, and init
    all derive from ``config.seed``, so identical inputs give bitwise
    identical checkpoints.
    """
    if not samples:
        raise TrainingError("empty dataset")
    arch = arch or Architecture(n_classes=config.loss.n_classes)
    rng = np.random.default_rng(config.seed)
    train_set, val_set, _ = split_dataset(samples, rng)
    if not train_set:
        raise TrainingError("training split is empty")
    preset = augment.PRESETS[config.preset]

    params = init_params(arch, rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    dropout_rng = np.random.default_rng(rng.integers(2**63))
    log = []

    if config.mode in ("cl_detached", "cl_attached"):
        pre = (
            config.pretrain_epochs
            if config.pretrain_epochs is not None
            else config.epochs // 2
        )
        phases = [
            ("contrastive", range(0, pre), tuple(params)),
            (
                "ce",
                range(pre, config.epochs),
                CLASSIFIER_PARAMS
                if config.mode == "cl_detached"
                else CLASSIFIER_PARAMS + ENCODER_PARAMS,
            ),
        ]
    elif config.mode == "ce_only":
        phases = [("ce", range(config.epochs), CLASSIFIER_PARAMS + ENCODER_PARAMS)]
    else:
        phases = [("joint", range(config.epochs), tuple(params))]

    for phase_name, epochs, trainable in phases:
        for epoch in epochs:
            order = rng.permutation(len(train_set))
            n_batches = max(1, len(order) // config.batch_size)
            epoch_loss = 0.0
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                if len(idx) == 0:
                    continue
                batch = [train_set[i] for i in idx]
                lr = lr_at(epoch + b / n_batches, config)

                if phase_name == "ce":
                    views = [
                        augment.apply(
                            augment.sample_transform(preset, rng), s.pixels, rng
                        )
                        for s in batch
                    ]
                    labels = np.array([s.label for s in batch])
                else:
                    views, labels_l = [], []
                    for s in batch:
                        v1, v2 = augment.augment_pair(s.pixels, preset, rng)
                        views += [v1, v2]
                        labels_l += [s.label, s.label]
                    labels = np.array(labels_l)

                x = np.stack([to_input(v, arch) for v in views])
                out = forward(params, x, arch, train=True, dropout_rng=dropout_rng)

                if phase_name == "joint":
                    res = lossmath.joint_loss(out["z"], out["logits"], labels, config.loss)
                    loss_val = res["loss"]
                    grads = backward(params, out["cache"], res["grad_z"], res["grad_logits"])
                elif phase_name == "contrastive":
                    loss_val, grad_z = lossmath.nt_xent(out["z"], config.loss.tau)
                    grads = backward(params, out["cache"], grad_z, None)
                else:  # ce
                    probs = lossmath.softmax(out["logits"])
                    grad_logits = np.zeros_like(out["logits"])
                    loss_val = 0.0
                    for i, lab in enumerate(labels):
                        target = lossmath.smoothed_targets(
                            int(lab), config.loss.alpha, arch.n_classes
                        )
                        li, gi = lossmath.cross_entropy(probs[i], target)
                        loss_val += li
                        grad_logits[i] = gi
                    loss_val /= len(labels)
                    grad_logits /= len(labels)
                    grads = backward(params, out["cache"], None, grad_logits)

                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"loss diverged at epoch {epoch} batch {b} ({phase_name})"
                    )
                _sgd_step(params, grads, velocity, lr, config.momentum, trainable)
                epoch_loss += loss_val

            entry = {
                "epoch": epoch,
                "phase": phase_name,
                "train_loss": epoch_loss / n_batches,
                "lr": lr_at(float(epoch), config),
            }
            if val_set:
                val_acc, val_loss = _accuracy_and_loss(params, arch, val_set, config)
                entry["val_accuracy"] = val_acc
                entry["val_ce"] = val_loss
            log.append(entry)
            if log_fn:
                log_fn(entry)

    checkpoint = {
        "arch": arch,
        "params": params,
        "meta": {
            "mode": config.mode,
            "preset": config.preset,
            "seed": config.seed,
            "epoch": config.epochs,
            "alpha": config.loss.alpha,
        },
    }
    return checkpoint, log


def predict(
    checkpoint: dict, samples: list[Sample], alpha: float | None = None
) -> list[uncert.PredictionRecord]:
    """Eval-mode softmax predictions with certainty scores for every sample."""
    arch: Architecture = checkpoint["arch"]
    params = checkpoint["params"]
    a = checkpoint["meta"].get("alpha", 0.01) if alpha is None else alpha
    xs = np.stack([to_input(s.pixels, arch) for s in samples])
    out = forward(params, xs, arch, train=False)
    probs = lossmath.softmax(out["logits"])
    records = []
    for i, s in enumerate(samples):
        records.append(
            uncert.PredictionRecord(
                id=s.id,
                true_label=s.label,
                probs=probs[i],
                certainty=uncert.certainty(probs[i], a, arch.n_classes),
            )
        )
    return records


def embed(checkpoint: dict, samples: list[Sample]) -> np.ndarray:
    """Representation-space embeddings R, one row per sample."""
    arch: Architecture = checkpoint["arch"]
    xs = np.stack([to_input(s.pixels, arch) for s in samples])
    out = forward(checkpoint["params"], xs, arch, train=False)
    return out["r"]


# ---------------------------------------------------------------------------
# checkpoint file format: magic, u32 LE metadata length, JSON, f32 LE tensors


def save_checkpoint(checkpoint: dict, path) -> None:
    arch: Architecture = checkpoint["arch"]
    params = checkpoint["params"]
    tensor_names = [name for name, _ in arch.layer_shapes()]
    meta = {
        "architecture": asdict(arch),
        "tensors": [
            {"name": n, "shape": list(params[n].shape)} for n in tensor_names
        ],
        **checkpoint["meta"],
    }
    blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in tensor_names:
            f.write(params[n].astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TrainingError(f"not a checkpoint file (magic {magic!r})")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        arch = Architecture(**meta["architecture"])
        params = {}
        for spec in meta["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise TrainingError(f"truncated tensor {spec['name']}")
            params[spec["name"]] = (
                np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
            )
    extra = {k: v for k, v in meta.items() if k not in ("architecture", "tensors")}
    return {"arch": arch, "params": params, "meta": extra}
