"""Experiment orchestration: config, train -> confidnet -> eval, ablations.

Artifacts written to the output directory:

* ``classifier.json`` / ``classifier.bin``: classifier checkpoint
* ``confidnet_phase1.*`` / ``confidnet_phase2.*``: confidence predictors
* ``report.json``: comparison report (see :func:`run_eval`)
* ``scores.csv``: per-sample test scores for every method
* ``ablation.json``: one table per ablation axis
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import criteria, metrics
from .baselines import McDropoutConfig, mcdropout_confidence, trustscore, trustscore_fit
from .checkpoint import checkpoint_paths
from .classifier import (
    ClassifierSpec, TrainConfig, TrainedClassifier, load_checkpoint, save_checkpoint, train_classifier,
)
from .confidnet import (
    ConfidNetConfig, ConfidencePredictor, finetune_encoder, load_predictor, save_predictor, train_head,
)
from .datapipe import LabeledDataset, SplitSpec, load_mnist, split, standardize, synth_blobs
from .errors import ConfigError, DependencyError, FailpredError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_VERSION = 1
METHODS = ("MCP", "MCDropout", "TrustScore", "ConfidNet")

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "seed": 0,
    "output_dir": "runs/experiment",
    "split": {"train_fraction": 0.6, "val_fraction": 0.1},
    "classifier": {
        "arch": "mlp", "hidden": [256], "dropout_rate": 0.3, "conv_channels": [32, 64],
        "epochs": 50, "batch_size": 128, "optimizer": "sgd-momentum", "learning_rate": 0.05,
        "momentum": 0.9, "patience": 5, "augment_shift": 0,
    },
    "confidnet": ConfidNetConfig().to_dict(),
    "baselines": {
        "mcdropout": {"samples": 100},
        "trustscore": {"k": 10, "alpha": 0.0, "space": "features", "backend": "auto"},
    },
    "metrics": list(metrics.METRIC_NAMES),
    "ablation": {"axes": ["phase", "fold", "loss", "criterion"]},
    "plot": {"bins": 20},
}

DATASET_DEFAULTS = {
    "synth_blobs": {"num_classes": 3, "n_per_class": 500, "dim": 2, "spread": 1.5, "data_seed": None},
    "mnist": {"standardize": False},
    "digits": {"standardize": False},
}


def _schema() -> dict:
    return json.loads(resources.files("failpred").joinpath("config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "config" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        if err.validator == "oneOf" and isinstance(err.instance, dict):
            kind = err.instance.get("kind")
            detail = f"no dataset variant accepts kind={kind!r} with keys {sorted(err.instance)}"
        else:
            detail = err.message
        raise ConfigError(f"{path}: {detail}")


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None, output_dir: str | None = None) -> "ExperimentConfig":
        validate_config(raw)
        merged = _merge(DEFAULTS, raw)
        kind = merged["dataset"]["kind"]
        merged["dataset"] = _merge(DATASET_DEFAULTS[kind], merged["dataset"])
        if kind == "mnist" and "split" not in raw:
            merged["split"] = {"train_fraction": 0.9, "val_fraction": 0.1}
        if merged["classifier"]["arch"] == "small-convnet" and "hidden" not in raw.get("classifier", {}):
            merged["classifier"]["hidden"] = [128]
        if seed is not None:
            merged["seed"] = int(seed)
        if output_dir is not None:
            merged["output_dir"] = str(output_dir)
        cfg = cls(merged)
        # construct once so semantic errors (e.g. loss/target pairing) surface before any work
        cfg.confidnet_config()
        cfg.split_spec()
        return cfg

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, output_dir: str | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DependencyError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        return cls.from_dict(raw, seed, output_dir)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def config_hash(self) -> str:
        # output location does not change results, so it is left out
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def split_spec(self) -> SplitSpec:
        s = self.raw["split"]
        return SplitSpec(s["train_fraction"], s["val_fraction"], self.seed)

    def train_config(self) -> TrainConfig:
        c = self.raw["classifier"]
        return TrainConfig(c["epochs"], c["batch_size"], c["optimizer"], c["learning_rate"], c["momentum"],
                           c["patience"], c["augment_shift"])

    def confidnet_config(self, **overrides) -> ConfidNetConfig:
        return ConfidNetConfig(**{**self.raw["confidnet"], **overrides})

    def classifier_spec(self, data: LabeledDataset) -> ClassifierSpec:
        c = self.raw["classifier"]
        return ClassifierSpec(c["arch"], data.input_shape, data.num_classes, tuple(c["hidden"]),
                              c["dropout_rate"], tuple(c["conv_channels"]))


# --------------------------------------------------------------------------
# data


@dataclass
class Folds:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    def describe(self) -> dict:
        return {"name": self.train.name.split("/")[0], "n_train": len(self.train), "n_val": len(self.val),
                "n_test": len(self.test), "num_classes": self.train.num_classes,
                "input_shape": list(self.train.input_shape), "provenance": self.train.provenance}


def load_digits_dataset() -> LabeledDataset:
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0)[:, None, :, :]
    return LabeledDataset(x, d.target, 10, "digits", {"source": "sklearn.datasets.load_digits"})


def prepare_data(cfg: ExperimentConfig) -> Folds:
    ds = cfg.raw["dataset"]
    spec = cfg.split_spec()
    if ds["kind"] == "synth_blobs":
        data_seed = cfg.seed if ds["data_seed"] is None else ds["data_seed"]
        pool = synth_blobs(ds["num_classes"], ds["n_per_class"], ds["dim"], ds["spread"], data_seed)
        train, val, test = split(pool, spec)
    elif ds["kind"] == "digits":
        train, val, test = split(load_digits_dataset(), spec)
    else:
        path = Path(ds["path"])
        try:
            pool = load_mnist(path, "train")
            test = load_mnist(path, "test")
        except FileNotFoundError as exc:
            raise DependencyError(str(exc)) from exc
        if spec.train_fraction + spec.val_fraction < 1.0 - 1e-12:
            raise ConfigError("config.split: for mnist, train_fraction + val_fraction must be 1 (test is t10k)")
        train, val, _ = split(pool, spec)
        test = test.subset(np.arange(len(test)), "mnist/test")
    if ds.get("standardize"):
        train, val, test = standardize(train, val, test)
    return Folds(train, val, test)


# --------------------------------------------------------------------------
# stages


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _blob_hash(stem: Path) -> str:
    _, bin_path = checkpoint_paths(stem)
    return hashlib.sha256(bin_path.read_bytes()).hexdigest()


def run_train(cfg: ExperimentConfig, folds: Folds | None = None) -> TrainedClassifier:
    folds = folds or prepare_data(cfg)
    t0 = time.perf_counter()
    model = train_classifier(cfg.classifier_spec(folds.train), folds.train, cfg.train_config(), cfg.seed,
                             folds.val)
    extra = {
        "config_hash": cfg.config_hash(),
        "test_accuracy": model.accuracy(folds.test),
        "wall_clock": {"train_seconds": time.perf_counter() - t0},
    }
    save_checkpoint(model, cfg.output_dir / "classifier", extra)
    # downstream stages always see the persisted (float32-rounded) weights
    return load_checkpoint(cfg.output_dir / "classifier")


def require_classifier(cfg: ExperimentConfig) -> TrainedClassifier:
    stem = cfg.output_dir / "classifier"
    json_path, bin_path = checkpoint_paths(stem)
    if not json_path.exists() or not bin_path.exists():
        raise DependencyError(f"classifier checkpoint missing at {json_path}; run 'train' first")
    return load_checkpoint(stem)


def fit_predictors(cfg: ExperimentConfig, model: TrainedClassifier, folds: Folds,
                   config: ConfidNetConfig | None = None) -> tuple[ConfidencePredictor, ConfidencePredictor | None]:
    config = config or cfg.confidnet_config()
    fold = folds.train if config.training_fold == "train" else folds.val
    if len(fold) == 0:
        raise ConfigError(f"confidnet training fold {config.training_fold!r} is empty")
    before = model.params_hash()
    p1 = train_head(model, fold, config, cfg.seed)
    p2 = finetune_encoder(p1, fold, cfg.seed, config) if config.phase2 else None
    if model.params_hash() != before:
        raise FailpredError("classifier parameters changed during confidence training")
    return p1, p2


def run_confidnet(cfg: ExperimentConfig, model: TrainedClassifier | None = None,
                  folds: Folds | None = None) -> ConfidencePredictor:
    model = model or require_classifier(cfg)
    folds = folds or prepare_data(cfg)
    t0 = time.perf_counter()
    p1, p2 = fit_predictors(cfg, model, folds)
    elapsed = time.perf_counter() - t0
    extra = {"config_hash": cfg.config_hash(), "classifier_blob_sha256": _blob_hash(cfg.output_dir / "classifier"),
             "wall_clock": {"confidnet_seconds": elapsed}}
    save_predictor(p1, cfg.output_dir / "confidnet_phase1", extra)
    if p2 is not None:
        save_predictor(p2, cfg.output_dir / "confidnet_phase2", extra)
    return require_predictor(cfg, model)


def require_predictor(cfg: ExperimentConfig, model: TrainedClassifier) -> ConfidencePredictor:
    for name in ("confidnet_phase2", "confidnet_phase1"):
        json_path, bin_path = checkpoint_paths(cfg.output_dir / name)
        if json_path.exists() and bin_path.exists():
            return load_predictor(cfg.output_dir / name, model)
    raise DependencyError(f"confidnet checkpoint missing in {cfg.output_dir}; run 'confidnet' first")


def _rc_json(points: list[metrics.RiskCoveragePoint]) -> list[dict]:
    return [{"threshold": p.threshold if math.isfinite(p.threshold) else None,
             "coverage": p.coverage, "selective_risk": p.selective_risk} for p in points]


def method_scores(cfg: ExperimentConfig, model: TrainedClassifier, predictor: ConfidencePredictor,
                  folds: Folds) -> dict[str, np.ndarray]:
    x = folds.test.features
    pred = model.predict(x)
    scores = {"MCP": pred.mcp}
    mc = cfg.raw["baselines"]["mcdropout"]
    scores["MCDropout"] = mcdropout_confidence(model, x, McDropoutConfig(mc["samples"], cfg.seed))
    ts = cfg.raw["baselines"]["trustscore"]
    if ts["space"] == "features":
        fit_x, query_x = model.features(folds.train.features), model.features(x)
    else:
        fit_x = folds.train.features.reshape(len(folds.train), -1)
        query_x = x.reshape(len(x), -1)
    index = trustscore_fit(fit_x, folds.train.labels, ts["k"], ts["alpha"], folds.train.num_classes, ts["backend"])
    scores["TrustScore"] = trustscore(index, query_x, pred.predicted)
    scores["ConfidNet"] = predictor.predict_confidence(x)
    return scores


def entropy_diagnostic(probs: np.ndarray, is_error: np.ndarray, confidnet: np.ndarray, bins: int = 10) -> dict:
    """Within bins of equal predictive entropy, compare ConfidNet means for correct vs wrong samples."""
    ent = criteria.entropy_confidence(probs)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.digitize(ent, edges[1:-1]), 0, bins - 1)
    rows = []
    for b in range(bins):
        in_bin = which == b
        ok, bad = in_bin & ~is_error, in_bin & is_error
        if ok.any() and bad.any():
            rows.append({"bin": b, "entropy_conf_lo": float(edges[b]), "entropy_conf_hi": float(edges[b + 1]),
                         "n_correct": int(ok.sum()), "n_error": int(bad.sum()),
                         "mean_confidnet_correct": float(confidnet[ok].mean()),
                         "mean_confidnet_error": float(confidnet[bad].mean())})
    return {
        "symmetric_pair": [criteria.entropy_confidence([0.65, 0.35]), criteria.entropy_confidence([0.35, 0.65])],
        "bins": rows,
        "bins_strictly_different": all(r["mean_confidnet_correct"] != r["mean_confidnet_error"] for r in rows),
        "bins_correct_higher": sum(r["mean_confidnet_correct"] > r["mean_confidnet_error"] for r in rows),
    }


def run_eval(cfg: ExperimentConfig, model: TrainedClassifier | None = None,
             predictor: ConfidencePredictor | None = None, folds: Folds | None = None) -> dict:
    """Score the test fold with every method and write ``report.json`` + ``scores.csv``."""
    model = model or require_classifier(cfg)
    predictor = predictor or require_predictor(cfg, model)
    folds = folds or prepare_data(cfg)
    t0 = time.perf_counter()
    test = folds.test
    pred = model.predict(test.features)
    is_error = pred.predicted != test.labels
    scores = method_scores(cfg, model, predictor, folds)
    wanted = cfg.raw["metrics"]
    methods = []
    for name in METHODS:
        entry: dict[str, Any] = {"name": name}
        try:
            all_metrics = metrics.evaluate(scores[name], is_error)
            entry["metrics"] = {k: all_metrics[k] for k in wanted}
            entry["risk_coverage"] = _rc_json(metrics.risk_coverage(scores[name], is_error))
            entry["status"] = "ok"
        except FailpredError as exc:
            entry.update(metrics=None, risk_coverage=None, status="failed", error=f"{exc.code}: {exc}")
        methods.append(entry)
    oracle = criteria.tcp(pred.probs, test.labels)
    guarantees = {"test": criteria.guarantee_report(pred.probs, test.labels).to_dict(),
                  "train": criteria.guarantee_report(model.predict(folds.train.features).probs,
                                                     folds.train.labels).to_dict()}
    guarantees["violations"] = guarantees["test"]["violations"] + guarantees["train"]["violations"]
    guarantees["overlap_mass"] = guarantees["test"]["overlap_mass"]
    try:
        tcp_reference = {"aupr_error_tcp": metrics.aupr_error(oracle, is_error),
                         "aupr_error_mcp": metrics.aupr_error(pred.mcp, is_error)}
    except FailpredError:
        tcp_reference = None
    report = {
        "report_version": REPORT_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "dataset": folds.describe(),
        "classifier": {"arch": model.spec.arch, "params_sha256": model.params_hash(),
                       "test_accuracy": float(1.0 - is_error.mean()),
                       "train_accuracy": model.accuracy(folds.train),
                       "n_test_errors": int(is_error.sum())},
        "confidnet": {"phase": predictor.phase, "config": predictor.config.to_dict()},
        "methods": methods,
        "guarantees": guarantees,
        "tcp_reference": tcp_reference,
        "entropy_diagnostic": entropy_diagnostic(pred.probs, is_error, scores["ConfidNet"]),
        "wall_clock": {"eval_seconds": time.perf_counter() - t0},
    }
    out = cfg.output_dir
    _write_json(out / "report.json", report)
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label", "predicted", "is_error", "tcp", *METHODS])
        for i in range(len(test)):
            w.writerow([i, int(test.labels[i]), int(pred.predicted[i]), int(is_error[i]), repr(float(oracle[i])),
                        *(repr(float(scores[m][i])) for m in METHODS)])
    return report


def run_pipeline(cfg: ExperimentConfig) -> dict:
    folds = prepare_data(cfg)
    model = run_train(cfg, folds)
    predictor = run_confidnet(cfg, model, folds)
    return run_eval(cfg, model, predictor, folds)


# --------------------------------------------------------------------------
# ablations


def _row(variant: str, predictor: ConfidencePredictor, test: LabeledDataset, is_error: np.ndarray,
         n_fold: int) -> dict:
    conf = predictor.predict_confidence(test.features)
    return {"variant": variant, "phase": predictor.phase, "n_training_samples": n_fold,
            **metrics.evaluate(conf, is_error)}


def run_ablate(cfg: ExperimentConfig, model: TrainedClassifier | None = None, folds: Folds | None = None) -> dict:
    """One table per axis; every other setting stays at the configured default."""
    model = model or require_classifier(cfg)
    folds = folds or prepare_data(cfg)
    t0 = time.perf_counter()
    base = cfg.confidnet_config()
    is_error = model.predict(folds.test.features).predicted != folds.test.labels
    tables: dict[str, list[dict]] = {}

    def fit(**over) -> tuple[ConfidencePredictor, ConfidencePredictor | None, int]:
        config = cfg.confidnet_config(**over)
        p1, p2 = fit_predictors(cfg, model, folds, config)
        return p1, p2, len(folds.train if config.training_fold == "train" else folds.val)

    final = lambda p1, p2: p2 if p2 is not None else p1  # noqa: E731
    axes = cfg.raw["ablation"]["axes"]
    if "phase" in axes:
        p1, p2, n = fit(phase2=True)
        tables["phase"] = [_row("confidence training", p1, folds.test, is_error, n),
                           _row("+ fine-tuning encoder", p2, folds.test, is_error, n)]
    if "fold" in axes:
        rows = []
        for fold in ("train", "val"):
            p1, p2, n = fit(training_fold=fold)
            rows.append(_row(f"{fold} set", final(p1, p2), folds.test, is_error, n))
        tables["fold"] = rows
    if "loss" in axes:
        rows = []
        for loss, target in (("mse", base.target if base.target != "binary-correctness" else "tcp"),
                             ("bce", "binary-correctness"), ("focal", "binary-correctness"),
                             ("ranking", "tcp")):
            p1, p2, n = fit(loss=loss, target=target)
            rows.append({**_row(loss, final(p1, p2), folds.test, is_error, n), "target": target})
        tables["loss"] = rows
    if "criterion" in axes:
        rows = []
        for target in ("tcp", "tcp-ratio"):
            p1, p2, n = fit(loss="mse", target=target)
            rows.append(_row(target, final(p1, p2), folds.test, is_error, n))
        tables["criterion"] = rows
    report = {
        "report_version": REPORT_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "dataset": folds.describe(),
        "classifier_params_sha256": model.params_hash(),
        "tables": tables,
        "wall_clock": {"ablate_seconds": time.perf_counter() - t0},
    }
    _write_json(cfg.output_dir / "ablation.json", report)
    return report


def strip_wall_clock(obj: Any) -> Any:
    """Copy of a report with every ``wall_clock`` entry removed, for reproducibility comparisons."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k != "wall_clock"}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj
