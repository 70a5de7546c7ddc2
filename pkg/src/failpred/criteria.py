"""Confidence criteria computed from a predictive distribution.

All functions accept a single distribution (1-D) or a batch of rows (2-D).
The predicted class is the argmax with ties broken by the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GuaranteeViolation, LabelError, NumericError

TARGET_KINDS = ("tcp", "tcp-ratio", "binary-correctness")


def _rows(dist) -> tuple[np.ndarray, bool]:
    p = np.asarray(dist, dtype=np.float64)
    return (p[None, :], True) if p.ndim == 1 else (p, False)


def _out(v: np.ndarray, single: bool):
    return float(v[0]) if single else v


def _labels(labels, n: int, k: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelError(f"true class must lie in [0, {k})")
    return y


def predicted_class(dist):
    p, single = _rows(dist)
    pred = p.argmax(axis=1)
    return int(pred[0]) if single else pred


def mcp(dist):
    """Maximum class probability."""
    p, single = _rows(dist)
    return _out(p.max(axis=1), single)


def tcp(dist, true_class):
    """Probability assigned to the true class."""
    p, single = _rows(dist)
    y = _labels(true_class, len(p), p.shape[1])
    return _out(p[np.arange(len(p)), y], single)


def tcp_ratio(dist, true_class):
    """TCP divided by MCP: exactly 1 for a correct prediction, in [0, 1) for an error."""
    p, single = _rows(dist)
    y = _labels(true_class, len(p), p.shape[1])
    top = p.max(axis=1)
    if np.any(top <= 0):
        raise NumericError("tcp_ratio undefined for an all-zero distribution")
    pred = p.argmax(axis=1)
    ratio = p[np.arange(len(p)), y] / top
    # keep the identity exact even when another class ties the maximum
    ratio = np.where(pred == y, 1.0, np.minimum(ratio, np.nextafter(1.0, 0.0)))
    return _out(ratio, single)


def entropy_confidence(dist):
    """``1 - H(p) / ln K``: 1 for a one-hot distribution, 0 for the uniform one."""
    p, single = _rows(dist)
    k = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=1)
    conf = np.clip(1.0 - h / math.log(k), 0.0, 1.0)
    return _out(conf, single)


def confidence_targets(dist, true_class, kind: str) -> np.ndarray:
    """Regression/classification targets for the confidence head."""
    p, _ = _rows(dist)
    y = _labels(true_class, len(p), p.shape[1])
    if kind == "tcp":
        return np.atleast_1d(tcp(p, y))
    if kind == "tcp-ratio":
        return np.atleast_1d(tcp_ratio(p, y))
    if kind == "binary-correctness":
        return (p.argmax(axis=1) == y).astype(np.float64)
    raise ValueError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")


# --------------------------------------------------------------------------
# guarantees


@dataclass
class GuaranteeReport:
    n_samples: int
    num_classes: int
    violations_high: int      # TCP > 1/2 yet misclassified
    violations_low: int       # TCP < 1/K yet correctly classified
    zone_fraction: float      # share of samples with TCP in [1/K, 1/2]
    zone_errors: int
    zone_successes: int
    overlap_mass: float       # min(zone errors, zone successes) / n

    @property
    def violations(self) -> int:
        return self.violations_high + self.violations_low

    def to_dict(self) -> dict:
        return {**asdict(self), "violations": self.violations}


def guarantee_report(probs: np.ndarray, labels: np.ndarray) -> GuaranteeReport:
    p, _ = _rows(probs)
    n, k = p.shape
    y = _labels(labels, n, k)
    t = p[np.arange(n), y]
    correct = p.argmax(axis=1) == y
    zone = (t >= 1.0 / k) & (t <= 0.5)
    zone_err = int(np.sum(zone & ~correct))
    zone_ok = int(np.sum(zone & correct))
    return GuaranteeReport(
        n_samples=n,
        num_classes=k,
        violations_high=int(np.sum((t > 0.5) & ~correct)),
        violations_low=int(np.sum((t < 1.0 / k) & correct)),
        zone_fraction=float(zone.mean()) if n else 0.0,
        zone_errors=zone_err,
        zone_successes=zone_ok,
        overlap_mass=min(zone_err, zone_ok) / n if n else 0.0,
    )


def check_guarantees(model, dataset) -> GuaranteeReport:
    """Evaluate both TCP guarantees on every sample; any violation raises."""
    probs = model.predict(dataset.features).probs
    report = guarantee_report(probs, dataset.labels)
    if report.violations:
        raise GuaranteeViolation(
            f"{report.violations_high} samples with TCP > 1/2 misclassified, "
            f"{report.violations_low} samples with TCP < 1/K correctly classified"
        )
    return report
