"""Patch classifiers (FF, CNN, Bayesian CNN): building, training, inference."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from ..diagram import LINE, NO_LINE, PatchSample
from .confidence import Detection, bayes_confidence, heuristic_confidence
from .layers import (
    Adam,
    BayesConv2D,
    BayesDense,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2,
    ReLU,
    _BayesMixin,
)

log = logging.getLogger(__name__)

KINDS = ("ff", "cnn", "bcnn")
CHECKPOINT_FORMAT = "qdtune-detector"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    conv_channels: tuple[int, ...] = ()
    kernel_size: int = 4
    hidden: tuple[int, ...] = (400, 100)
    train_updates: int = 15000
    learning_rate: float = 5e-4
    dropout_rate: float = 0.6
    batch_size: int = 512
    bayes_samples: int = 1
    patch_size: int = 18
    eval_every: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.kind == "bcnn" and self.bayes_samples < 2:
            raise ValueError("bcnn needs at least 2 inference samples")

    @property
    def bayesian(self) -> bool:
        return self.kind == "bcnn"

    def desk_scale(self) -> "ModelSpec":
        """CI-sized variant: a tenth of the updates and batches of 128."""
        return replace(self, train_updates=max(1, self.train_updates // 10), batch_size=128)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelSpec":
        return cls(**raw)


def default_spec(kind: str, seed: int = 0) -> ModelSpec:
    """Architecture and training defaults of the three detector models."""
    if kind == "ff":
        return ModelSpec("ff", (), 4, (400, 100), 15000, 5e-4, 0.6, 512, 1, seed=seed)
    if kind == "cnn":
        return ModelSpec("cnn", (12, 24), 4, (200, 100), 30000, 1e-3, 0.6, 512, 1, seed=seed)
    if kind == "bcnn":
        return ModelSpec("bcnn", (12, 24), 4, (200, 100), 30000, 1e-3, 0.0, 512, 10, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


class Network:
    """Sequential stack ending in a single logit."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        bayes = spec.bayesian
        conv = BayesConv2D if bayes else Conv2D
        dense = BayesDense if bayes else Dense
        layers: list[Layer] = []
        c, size = 1, spec.patch_size
        for ch in spec.conv_channels:
            layers += [conv(c, ch, spec.kernel_size, rng), ReLU(), MaxPool2()]
            c, size = ch, (size - spec.kernel_size + 1) // 2
            if size < 1:
                raise ValueError("patch too small for the convolution stack")
        layers.append(Flatten())
        width = c * size * size
        for h in spec.hidden:
            layers += [dense(width, h, rng), ReLU()]
            if spec.dropout_rate > 0:
                layers.append(Dropout(spec.dropout_rate))
            width = h
        layers.append(dense(width, 1, rng))
        # The first affine layer never needs a gradient w.r.t. the input.
        first = next(layer for layer in layers if hasattr(layer, "need_input_grad"))
        first.need_input_grad = False
        self.layers = layers

    @property
    def param_slots(self) -> list[tuple[int, str]]:
        return [(i, k) for i, layer in enumerate(self.layers) for k in layer.params]

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[i].params[k] for i, k in self.param_slots]

    def gradients(self) -> list[np.ndarray]:
        return [self.layers[i].grads[k] for i, k in self.param_slots]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for p in self.parameters():
            n = p.size
            p[...] = flat[pos:pos + n].reshape(p.shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"parameter vector has {flat.size} values, network needs {pos}")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def bayes_layers(self) -> list[_BayesMixin]:
        return [layer for layer in self.layers if isinstance(layer, _BayesMixin)]

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x[:, 0]

    def backward(self, dlogits: np.ndarray) -> None:
        d = dlogits[:, None]
        for layer in reversed(self.layers):
            d = layer.backward(d)
            if d is None:
                break

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def kl(self) -> float:
        return sum(layer.kl() for layer in self.bayes_layers())

    def loss_and_grad(
        self, x, targets, rng, kl_weight: float = 0.0, train: bool = True, reduction: str = "mean"
    ) -> float:
        """Binary cross-entropy (plus weighted KL) and its gradient.

        Gradients accumulate into each layer's ``grads``.
        """
        self.zero_grad()
        logits = self.forward(x, train=train, rng=rng)
        bce = np.logaddexp(0.0, logits) - targets * logits
        p = np.exp(-np.logaddexp(0.0, -logits))
        dlogits = p - targets
        if reduction == "mean":
            loss = float(bce.mean())
            dlogits = dlogits / len(x)
        else:
            loss = float(bce.sum())
        self.backward(dlogits)
        if kl_weight:
            loss += kl_weight * self.kl()
            for layer in self.bayes_layers():
                layer.add_kl_grad(kl_weight)
        return loss


def _as_input(values: np.ndarray, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (spec.patch_size, spec.patch_size):
        raise ShapeError(
            f"expected {spec.patch_size}x{spec.patch_size} patches, got {x.shape[1:]}"
        )
    return x[:, None, :, :]


def stack_patches(patches: Sequence[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.values for p in patches]).astype(float)
    y = np.array([p.category == LINE for p in patches], dtype=float)
    return x, y


@dataclass(frozen=True, eq=False)
class TrainedDetector:
    spec: ModelSpec
    parameters: np.ndarray
    log: tuple[dict, ...] = ()
    thresholds: "object | None" = None  # calibrate.ThresholdSet

    def __post_init__(self):
        flat = np.array(self.parameters, dtype=float)
        flat.setflags(write=False)
        object.__setattr__(self, "parameters", flat)
        object.__setattr__(self, "log", tuple(self.log))

    @cached_property
    def network(self) -> Network:
        net = Network(self.spec, np.random.default_rng(0))
        net.set_flat(self.parameters)
        return net

    def checksum(self) -> str:
        return hashlib.sha256(self.parameters.astype("<f8").tobytes()).hexdigest()

    def with_thresholds(self, thresholds) -> "TrainedDetector":
        return TrainedDetector(self.spec, self.parameters, self.log, thresholds)

    def predict_samples(self, values: np.ndarray, sampling_seed: int | None = None) -> np.ndarray:
        """Sigmoid outputs, shape ``(n_samples, n_patches)``."""
        x = _as_input(values, self.spec)
        net = self.network
        if not self.spec.bayesian:
            return _sigmoid(net.forward(x))[None]
        rng = np.random.default_rng(0 if sampling_seed is None else sampling_seed)
        return np.stack([_sigmoid(net.forward(x, rng=rng)) for _ in range(self.spec.bayes_samples)])

    def infer_batch(self, values: np.ndarray, sampling_seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Raw outputs ``y`` and confidence scores for a stack of patches."""
        samples = self.predict_samples(values, sampling_seed)
        if not self.spec.bayesian:
            y = samples[0]
            return y, np.abs(0.5 - y) * 2
        y = samples.mean(axis=0)
        conf = np.clip(1.0 - 2.0 * samples.std(axis=0), 0.0, 1.0)
        conf[samples.min(axis=0) == samples.max(axis=0)] = 1.0
        return y, conf


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def infer(det: TrainedDetector, patch: np.ndarray, sampling_seed: int | None = None) -> Detection:
    patch = np.asarray(patch, dtype=float)
    if patch.shape != (det.spec.patch_size, det.spec.patch_size):
        raise ShapeError(f"expected a {det.spec.patch_size}x{det.spec.patch_size} patch, got {patch.shape}")
    samples = det.predict_samples(patch, sampling_seed)[:, 0]
    if det.spec.bayesian:
        y = float(samples.mean())
        conf = bayes_confidence(samples)
    else:
        y = float(samples[0])
        conf = heuristic_confidence(y)
    return Detection(y=y, category=LINE if y >= 0.5 else NO_LINE, confidence=conf)


def _accuracy(det_like, x, y, sampling_seed=0) -> float:
    pred, _ = det_like.infer_batch(x, sampling_seed)
    return float(np.mean((pred >= 0.5) == (y == 1)))


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Sampling probabilities giving each class half of the expected batch."""
    labels = np.asarray(labels)
    n_line = labels.sum()
    w = np.where(labels == 1, 0.5 / n_line, 0.5 / (len(labels) - n_line))
    return w / w.sum()


def train(
    spec: ModelSpec, train_set: Sequence[PatchSample], val_set: Sequence[PatchSample]
) -> TrainedDetector:
    """Fit ``spec`` with class-balanced mini-batches; keep the best validation checkpoint."""
    if not train_set or not val_set:
        raise TrainingError("training and validation sets must be non-empty")
    x_tr, y_tr = stack_patches(train_set)
    x_va, y_va = stack_patches(val_set)
    for name, y in (("training", y_tr), ("validation", y_va)):
        if y.min() == y.max():
            raise TrainingError(f"single-class {name} set")
    x_tr = _as_input(x_tr, spec)

    rng = np.random.default_rng(spec.seed)
    net = Network(spec, rng)
    opt = Adam(net.parameters(), spec.learning_rate)

    weights = balanced_weights(y_tr)
    num_batches = max(1, math.ceil(len(y_tr) / spec.batch_size))
    eval_every = spec.eval_every or max(1, spec.train_updates // 25)

    best_acc, best_flat, history, running = -1.0, net.get_flat(), [], []
    for update in range(1, spec.train_updates + 1):
        idx = rng.choice(len(y_tr), size=spec.batch_size, p=weights)
        if spec.bayesian:
            # Per-batch ELBO: summed BCE plus KL / number of batches, scaled by batch size.
            loss = net.loss_and_grad(
                x_tr[idx], y_tr[idx], rng, kl_weight=1.0 / num_batches, reduction="sum"
            ) / spec.batch_size
            grads = [g / spec.batch_size for g in net.gradients()]
        else:
            loss = net.loss_and_grad(x_tr[idx], y_tr[idx], rng)
            grads = net.gradients()
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at update {update}")
        opt.step(grads)
        running.append(loss)
        if update % eval_every == 0 or update == spec.train_updates:
            snapshot = TrainedDetector(spec, net.get_flat())
            acc = _accuracy(snapshot, x_va, y_va)
            history.append({"update": update, "loss": float(np.mean(running)), "val_accuracy": acc})
            log.debug("update %d loss %.4f val_acc %.4f", update, np.mean(running), acc)
            running = []
            if acc > best_acc:
                best_acc, best_flat = acc, snapshot.parameters
    return TrainedDetector(spec, best_flat, tuple(history))


# ---------------------------------------------------------------- checkpoints


def detector_to_dict(det: TrainedDetector) -> dict:
    blob = base64.b64encode(det.parameters.astype("<f8").tobytes()).decode("ascii")
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": det.spec.to_dict(),
        "parameters": {"dtype": "<f8", "count": int(det.parameters.size), "data": blob},
        "log": list(det.log),
        "thresholds": det.thresholds.to_dict() if det.thresholds is not None else None,
    }


def detector_from_dict(raw: dict) -> TrainedDetector:
    from ..calibrate import ThresholdSet

    if raw.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a detector checkpoint")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {raw.get('version')}")
    spec = ModelSpec.from_dict(raw["spec"])
    params = np.frombuffer(base64.b64decode(raw["parameters"]["data"]), dtype="<f8")
    if params.size != raw["parameters"]["count"]:
        raise ValueError("checkpoint parameter count mismatch")
    thresholds = raw.get("thresholds")
    return TrainedDetector(
        spec,
        params.astype(float),
        tuple(raw.get("log", ())),
        ThresholdSet.from_dict(thresholds) if thresholds else None,
    )


def dumps_detector(det: TrainedDetector) -> bytes:
    return json.dumps(detector_to_dict(det), indent=1, sort_keys=True).encode()


def loads_detector(data: bytes | str) -> TrainedDetector:
    return detector_from_dict(json.loads(data))
