"""Confidence head trained to regress the true-class probability of a frozen classifier.

Phase 1 freezes the classifier entirely and fits the head on its penultimate
features. Phase 2 clones the feature encoder and fine-tunes the clone together
with the head, with dropout off and a reduced learning rate; the original
classifier is never written to.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import checkpoint as ckpt
from .classifier import TrainedClassifier
from .criteria import TARGET_KINDS, confidence_targets
from .datapipe import LabeledDataset, batch_indices
from .errors import ConfigError, DimensionError, FormatError, PhaseError, TrainingError
from .gradcore import (
    Adam, Dense, ParamSnapshot, ReLU, Sequential, Sigmoid,
    bce_loss, focal_loss, mse_loss, ranking_loss,
)
from .rng import make_rng

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "bce", "focal", "ranking")
_ALLOWED_TARGETS = {
    "mse": ("tcp", "tcp-ratio"),
    "bce": ("binary-correctness",),
    "focal": ("binary-correctness",),
    "ranking": TARGET_KINDS,
}


@dataclass
class ConfidNetConfig:
    target: str = "tcp"
    loss: str = "mse"
    training_fold: str = "train"
    hidden: tuple[int, ...] = (400, 400, 400, 400)
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    patience: int = 10
    holdout_fraction: float = 0.1
    ranking_margin: float = 0.1
    focal_gamma: float = 2.0
    phase2: bool = True
    phase2_epochs: int = 20
    phase2_lr_factor: float = 0.1
    phase2_train_head: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.target not in TARGET_KINDS:
            raise ConfigError(f"unknown target {self.target!r}; expected one of {TARGET_KINDS}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.target not in _ALLOWED_TARGETS[self.loss]:
            raise ConfigError(f"loss {self.loss!r} cannot be paired with target {self.target!r}")
        if self.training_fold not in ("train", "val"):
            raise ConfigError(f"training_fold must be 'train' or 'val', got {self.training_fold!r}")
        if len(self.hidden) != 4 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"the head has 4 hidden dense layers of positive width, got {self.hidden}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")
        if self.phase2_lr_factor < 0:
            raise ConfigError("phase2_lr_factor must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class ConfidenceHead:
    """Five dense layers (ReLU between them) ending in a sigmoid scalar."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...] = (400, 400, 400, 400),
                 rng: np.random.Generator | None = None):
        layers = []
        width = input_dim
        for h in hidden:
            layers += [Dense(width, h, rng=rng), ReLU()]
            width = h
        layers += [Dense(width, 1, rng=rng), Sigmoid()]
        self.net = Sequential(layers)
        self.input_dim = input_dim
        self.hidden = tuple(hidden)

    def params(self):
        return self.net.params()

    def forward(self, features: np.ndarray) -> np.ndarray:
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise DimensionError(f"head expects features of width {self.input_dim}, got shape {features.shape}")
        return self.net.forward(features, "inference")[:, 0]

    def backward(self, dconf: np.ndarray) -> np.ndarray:
        return self.net.backward(dconf[:, None])


def build_targets(model: TrainedClassifier, fold: LabeledDataset, kind: str) -> np.ndarray:
    """Per-sample confidence targets from the frozen classifier (dropout off)."""
    probs = model.predict(fold.features).probs
    return confidence_targets(probs, fold.labels, kind)


def _loss_fn(config: ConfidNetConfig) -> Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]:
    if config.loss == "mse":
        return lambda c, t, ok: tuple(mse_loss(c, t))
    if config.loss == "bce":
        return lambda c, t, ok: tuple(bce_loss(c, t))
    if config.loss == "focal":
        return lambda c, t, ok: tuple(focal_loss(c, t, config.focal_gamma))

    def rank(c, t, ok):
        value, grad, _ = ranking_loss(c, ok, config.ranking_margin)
        return value, grad
    return rank


@dataclass
class ConfidencePredictor:
    classifier: TrainedClassifier
    head: ConfidenceHead
    encoder: Sequential | None = None
    phase: int = 1
    config: ConfidNetConfig = field(default_factory=ConfidNetConfig)
    history: list[dict] = field(default_factory=list)

    def features(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        if self.encoder is None:
            return self.classifier.features(x, batch_size)
        x = self.classifier._check_input(x)
        out = [self.encoder.forward(x[i:i + batch_size], "inference") for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.head.input_dim))

    def predict_confidence(self, x: np.ndarray) -> np.ndarray:
        """Confidence in [0, 1] per input; uses the fine-tuned encoder when present."""
        return self.head.forward(self.features(x))

    def classify(self, x: np.ndarray):
        return self.classifier.predict(x)


class _Trainer:
    """Shared epoch loop with held-out early stopping."""

    def __init__(self, config: ConfidNetConfig, seed: int, tag: str):
        self.config, self.seed, self.tag = config, seed, tag
        self.loss = _loss_fn(config)

    def holdout_split(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        n_hold = int(math.floor(self.config.holdout_fraction * n))
        if n - n_hold < 1:
            n_hold = 0
        perm = make_rng(self.seed, "confidnet-holdout").permutation(n)
        return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])

    def run(self, forward: Callable, backward: Callable, params, opt, n_train: int, epochs: int,
            eval_holdout: Callable[[], float] | None) -> list[dict]:
        cfg = self.config
        history = []
        best, best_loss, stale = None, math.inf, 0
        if eval_holdout is not None:
            # the starting point competes too: training must beat it to be kept
            best_loss, best = eval_holdout(), ParamSnapshot.take(params)
            history.append({"epoch": 0, "holdout_loss": best_loss})
        for epoch in range(1, epochs + 1):
            total, count = 0.0, 0
            shuffle = int(make_rng(self.seed, "confidnet-batches", self.tag, epoch).integers(2**62))
            for idx in batch_indices(n_train, cfg.batch_size, shuffle_seed=shuffle):
                value, grad = forward(idx)
                if not math.isfinite(value):
                    raise TrainingError(f"confidence {self.tag} training diverged at epoch {epoch}: loss {value}")
                backward(grad)
                opt.step()
                total += value * len(idx)
                count += len(idx)
            entry = {"epoch": epoch, "train_loss": total / max(count, 1)}
            if eval_holdout is not None:
                entry["holdout_loss"] = eval_holdout()
                if entry["holdout_loss"] < best_loss:
                    best_loss, best, stale = entry["holdout_loss"], ParamSnapshot.take(params), 0
                else:
                    stale += 1
            history.append(entry)
            log.info("confidnet %s epoch %d: %s", self.tag, epoch, entry)
            if eval_holdout is not None and stale >= cfg.patience:
                break
        if best is not None:
            best.restore(params)
        return history


def train_head(model: TrainedClassifier, fold: LabeledDataset, config: ConfidNetConfig, seed: int
               ) -> ConfidencePredictor:
    """Phase 1: fit the head on frozen penultimate features. Only the head's parameters change."""
    if len(fold) == 0:
        raise ConfigError("cannot train the confidence head on an empty fold")
    trainer = _Trainer(config, seed, "phase1")
    # frozen encoder: features and targets computed once
    feats = model.features(fold.features)
    probs = model.predict(fold.features).probs
    targets = confidence_targets(probs, fold.labels, config.target)
    correct = (probs.argmax(axis=1) == fold.labels).astype(np.float64)
    train_idx, hold_idx = trainer.holdout_split(len(fold))

    head = ConfidenceHead(feats.shape[1], config.hidden, rng=make_rng(seed, "confidnet-init"))
    params = head.params()
    opt = Adam(params, config.learning_rate)

    def forward(idx):
        sel = train_idx[idx]
        c = head.forward(feats[sel])
        return trainer.loss(c, targets[sel], correct[sel])

    def backward(grad):
        head.backward(grad)

    def holdout():
        c = head.forward(feats[hold_idx])
        return trainer.loss(c, targets[hold_idx], correct[hold_idx])[0]

    history = trainer.run(forward, backward, params, opt, len(train_idx), config.epochs,
                          holdout if hold_idx.size else None)
    return ConfidencePredictor(model, head, None, 1, config, [{"phase": 1, **h} for h in history])


def finetune_encoder(predictor: ConfidencePredictor, fold: LabeledDataset, seed: int,
                     config: ConfidNetConfig | None = None) -> ConfidencePredictor:
    """Phase 2: clone the encoder and fine-tune clone (+ head) with dropout off and a scaled learning rate.

    Returns a new predictor; the input predictor and its classifier are left untouched.
    """
    if predictor.phase != 1 or predictor.encoder is not None:
        raise PhaseError("phase 2 requires a phase-1 predictor")
    config = config or predictor.config
    model = predictor.classifier
    trainer = _Trainer(config, seed, "phase2")
    probs = model.predict(fold.features).probs
    targets = confidence_targets(probs, fold.labels, config.target)
    correct = (probs.argmax(axis=1) == fold.labels).astype(np.float64)
    train_idx, hold_idx = trainer.holdout_split(len(fold))

    encoder = copy.deepcopy(model.encoder)
    head = copy.deepcopy(predictor.head)
    params = encoder.params() + (head.params() if config.phase2_train_head else [])
    opt = Adam(params, config.learning_rate * config.phase2_lr_factor)
    x = fold.features

    def forward(idx):
        sel = train_idx[idx]
        c = head.forward(encoder.forward(x[sel], "inference"))
        return trainer.loss(c, targets[sel], correct[sel])

    def backward(grad):
        encoder.backward(head.backward(grad))
        if not config.phase2_train_head:
            for p in head.params():
                p.zero_grad()

    def holdout():
        out = [head.forward(encoder.forward(x[hold_idx[i:i + 2048]], "inference"))
               for i in range(0, hold_idx.size, 2048)]
        return trainer.loss(np.concatenate(out), targets[hold_idx], correct[hold_idx])[0]

    history = trainer.run(forward, backward, params, opt, len(train_idx), config.phase2_epochs,
                          holdout if hold_idx.size else None)
    return ConfidencePredictor(model, head, encoder, 2, config,
                               predictor.history + [{"phase": 2, **h} for h in history])


def fit_confidnet(model: TrainedClassifier, fold: LabeledDataset, config: ConfidNetConfig, seed: int
                  ) -> tuple[ConfidencePredictor, ConfidencePredictor | None]:
    """Run phase 1 and, when enabled, phase 2. Returns ``(phase1, phase2_or_None)``."""
    p1 = train_head(model, fold, config, seed)
    p2 = finetune_encoder(p1, fold, seed, config) if config.phase2 else None
    return p1, p2


# --------------------------------------------------------------------------
# persistence


def save_predictor(predictor: ConfidencePredictor, path: str | Path, extra: dict | None = None) -> dict:
    tensors = [(f"head{i}", p.value) for i, p in enumerate(predictor.head.params())]
    if predictor.encoder is not None:
        tensors += [(f"encoder{i}", p.value) for i, p in enumerate(predictor.encoder.params())]
    manifest = {
        "kind": "confidnet",
        "phase": predictor.phase,
        "input_dim": predictor.head.input_dim,
        "hidden": list(predictor.head.hidden),
        "config": predictor.config.to_dict(),
        "classifier_hash": predictor.classifier.params_hash(),
        "classifier_spec": predictor.classifier.spec.to_dict(),
        "history": predictor.history,
        **(extra or {}),
    }
    return ckpt.write_checkpoint(path, manifest, tensors)


def load_predictor(path: str | Path, classifier: TrainedClassifier) -> ConfidencePredictor:
    manifest, arrays = ckpt.read_checkpoint(path)
    if manifest.get("kind") != "confidnet":
        raise FormatError(f"checkpoint {path} holds a {manifest.get('kind')!r}, not a confidnet head")
    if manifest.get("phase") not in (1, 2):
        raise FormatError(f"checkpoint {path} has invalid phase {manifest.get('phase')!r}")
    if manifest["classifier_hash"] != classifier.params_hash():
        raise ConfigError(f"confidnet checkpoint {path} was trained on a different classifier")
    head = ConfidenceHead(manifest["input_dim"], tuple(manifest["hidden"]))
    n_head = len(head.params())
    ckpt.assign(head.params(), arrays[:n_head], where=f"{path} (head)")
    encoder = None
    if manifest["phase"] == 2:
        encoder = copy.deepcopy(classifier.encoder)
        ckpt.assign(encoder.params(), arrays[n_head:], where=f"{path} (encoder)")
    elif len(arrays) != n_head:
        raise FormatError(f"phase-1 checkpoint {path} carries {len(arrays) - n_head} unexpected tensors")
    return ConfidencePredictor(classifier, head, encoder, manifest["phase"],
                               ConfidNetConfig(**{**manifest["config"], "hidden": tuple(manifest["config"]["hidden"])}),
                               manifest.get("history", []))
