"""Base classification models and their training by cross-entropy minimisation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from . import checkpoint as ckpt
from .datapipe import LabeledDataset, batch_indices, random_shift
from .errors import ConfigError, DimensionError, FormatError, NumericError, TrainingError
from .gradcore import (
    Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ParamSnapshot, ReLU, Sequential,
    make_optimizer, softmax, softmax_cross_entropy,
)
from .rng import make_rng

log = logging.getLogger(__name__)

ARCHS = ("mlp", "small-convnet")


@dataclass(frozen=True)
class ClassifierSpec:
    arch: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (256,)
    dropout_rate: float = 0.3
    conv_channels: tuple[int, ...] = (32, 64)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.arch == "small-convnet" and len(self.input_shape) != 3:
            raise ConfigError(f"small-convnet needs (C, H, W) inputs, got {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("input_shape", "hidden", "conv_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassifierSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"]), "hidden": tuple(d["hidden"]),
                      "conv_channels": tuple(d.get("conv_channels", (32, 64)))})


def build_encoder(spec: ClassifierSpec, rng: np.random.Generator | None) -> Sequential:
    """Everything up to (excluding) the final classification layer."""
    layers: list[Layer] = []
    if spec.arch == "mlp":
        width = math.prod(spec.input_shape)
        layers.append(Flatten())
    else:
        c, h, w = spec.input_shape
        for out_c in spec.conv_channels:
            layers += [Conv2D(c, out_c, 3, rng=rng), ReLU(), MaxPool2D(2)]
            c, h, w = out_c, (h - 2) // 2, (w - 2) // 2
            if h < 1 or w < 1:
                raise ConfigError(f"input {spec.input_shape} too small for {len(spec.conv_channels)} conv blocks")
        layers.append(Flatten())
        width = c * h * w
    for size in spec.hidden:
        layers += [Dense(width, size, rng=rng), ReLU()]
        width = size
    layers.append(Dropout(spec.dropout_rate))
    return Sequential(layers)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    optimizer: str = "sgd-momentum"
    learning_rate: float = 0.05
    momentum: float = 0.9
    patience: int = 5
    augment_shift: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


class Prediction(NamedTuple):
    probs: np.ndarray
    predicted: np.ndarray
    mcp: np.ndarray


class TrainedClassifier:
    """Model M: a feature encoder followed by one dense classification layer and softmax."""

    def __init__(self, spec: ClassifierSpec, encoder: Sequential, classification: Dense,
                 seed: int = 0, history: list[dict] | None = None):
        self.spec = spec
        self.encoder = encoder
        self.classification = classification
        self.seed = seed
        self.history = history or []

    @classmethod
    def initialise(cls, spec: ClassifierSpec, seed: int) -> "TrainedClassifier":
        rng = make_rng(seed, "classifier-init")
        encoder = build_encoder(spec, rng)
        return cls(spec, encoder, Dense(spec.feature_dim, spec.num_classes, rng=rng), seed)

    @property
    def network(self) -> Sequential:
        return Sequential(self.encoder.layers + [self.classification])

    def params(self):
        return self.network.params()

    def classification_hash(self) -> str:
        return ckpt.params_hash([p.value for p in self.classification.params()])

    def params_hash(self) -> str:
        return ckpt.params_hash([p.value for p in self.params()])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} does not match model input shape {self.spec.input_shape}")
        return x

    def features(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        """Penultimate activations (input of the classification layer), dropout off."""
        x = self._check_input(x)
        return _batched(lambda b: self.encoder.forward(b, "inference"), x, batch_size)

    def logits(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        x = self._check_input(x)
        return _batched(lambda b: self.network.forward(b, "inference"), x, batch_size)

    def predict(self, x: np.ndarray, batch_size: int = 2048) -> Prediction:
        probs = softmax(self.logits(x, batch_size))
        predicted = probs.argmax(axis=1)
        return Prediction(probs, predicted, probs[np.arange(len(probs)), predicted])

    def accuracy(self, data: LabeledDataset) -> float:
        if len(data) == 0:
            return float("nan")
        return float(np.mean(self.predict(data.features).predicted == data.labels))


def _batched(fn, x: np.ndarray, batch_size: int) -> np.ndarray:
    if len(x) <= batch_size:
        return fn(x)
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def train_classifier(spec: ClassifierSpec, train: LabeledDataset, config: TrainConfig, seed: int,
                     val: LabeledDataset | None = None) -> TrainedClassifier:
    """Minimise mean cross-entropy with mini-batch SGD.

    With a non-empty ``val`` fold, training stops after ``patience`` epochs
    without validation-accuracy improvement and the best epoch's parameters are
    restored.
    """
    if train.num_classes != spec.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes but spec expects {spec.num_classes}")
    if train.input_shape != spec.input_shape:
        raise DimensionError(f"dataset input shape {train.input_shape} does not match spec {spec.input_shape}")
    model = TrainedClassifier.initialise(spec, seed)
    net = model.network
    params = net.params()
    hyper = {"momentum": config.momentum} if config.optimizer in ("sgd", "sgd-momentum") else {}
    opt = make_optimizer(config.optimizer, params, config.learning_rate, **hyper)
    dropout_rng = make_rng(seed, "classifier-dropout")
    aug_rng = make_rng(seed, "classifier-augment")
    use_val = val is not None and len(val) > 0
    best_acc, best, stale = -1.0, None, 0

    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        shuffle = int(make_rng(seed, "classifier-batches", epoch).integers(2**62))
        for idx in batch_indices(len(train), config.batch_size, shuffle_seed=shuffle):
            xb, yb = train.features[idx], train.labels[idx]
            if config.augment_shift and xb.ndim == 4:
                xb = random_shift(xb, config.augment_shift, aug_rng)
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net.forward(xb, "train", dropout_rng)
            try:
                loss, grad = softmax_cross_entropy(logits, yb)
            except NumericError as exc:
                raise TrainingError(f"classifier training diverged at epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"classifier training diverged at epoch {epoch}: loss {loss}")
            net.backward(grad)
            opt.step()
            total += loss * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "train_loss": total / count}
        if use_val:
            entry["val_accuracy"] = model.accuracy(val)
        model.history.append(entry)
        log.info("classifier epoch %d: %s", epoch, entry)
        if use_val:
            if entry["val_accuracy"] > best_acc:
                best_acc, best, stale = entry["val_accuracy"], ParamSnapshot.take(params), 0
                model.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best is not None:
        best.restore(params)
    return model


# --------------------------------------------------------------------------
# persistence


def save_checkpoint(model: TrainedClassifier, path: str | Path, extra: dict | None = None) -> dict:
    tensors = [(f"param{i}", p.value) for i, p in enumerate(model.params())]
    manifest = {"kind": "classifier", "spec": model.spec.to_dict(), "seed": model.seed,
                "history": model.history, **(extra or {})}
    return ckpt.write_checkpoint(path, manifest, tensors)


def load_checkpoint(path: str | Path) -> TrainedClassifier:
    manifest, arrays = ckpt.read_checkpoint(path)
    if manifest.get("kind") != "classifier":
        raise FormatError(f"checkpoint {path} holds a {manifest.get('kind')!r}, not a classifier")
    spec = ClassifierSpec.from_dict(manifest["spec"])
    encoder = build_encoder(spec, None)
    model = TrainedClassifier(spec, encoder, Dense(spec.feature_dim, spec.num_classes),
                              seed=manifest.get("seed", 0), history=manifest.get("history", []))
    ckpt.assign(model.params(), arrays, where=str(path))
    return model
