"""Failure-prediction metrics over (confidence, is_error) outcomes.

Conventions:

* AUPR-Error: errors are positives, ranked by *ascending* confidence.
* AUPR-Success, AUROC, FPR@95%TPR: correct predictions are positives, ranked
  by descending confidence.
* AUPR is the step-wise average precision ``sum_n (R_n - R_{n-1}) P_n`` with
  one threshold per distinct score, so tied scores enter together.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, FormatError, NumericError, UndefinedMetricError

METRIC_NAMES = ("fpr_at_95_tpr", "aupr_error", "aupr_success", "auroc")


class ScoredOutcome(NamedTuple):
    confidence: float
    is_error: bool


@dataclass(frozen=True)
class RiskCoveragePoint:
    threshold: float
    coverage: float
    selective_risk: float


def as_arrays(confidence, is_error) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(confidence, dtype=np.float64).reshape(-1)
    e = np.asarray(is_error).astype(bool).reshape(-1)
    if c.shape != e.shape:
        raise DimensionError(f"{c.size} confidences but {e.size} error flags")
    if not np.all(np.isfinite(c)):
        raise NumericError("confidence scores must be finite")
    return c, e


def _need_both(positive: np.ndarray, what: str) -> None:
    n_pos = int(positive.sum())
    if n_pos == 0 or n_pos == positive.size:
        raise UndefinedMetricError(f"{what} needs both errors and successes (got {n_pos} of {positive.size})")


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve, higher score = flagged first."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    _need_both(positive, "average precision")
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    tp = np.cumsum(pos)
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp_at = tp[ends]
    flagged = ends + 1
    precision = tp_at / flagged
    recall = tp_at / tp[-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def aupr(confidence, is_error, positive: str = "error") -> float:
    c, e = as_arrays(confidence, is_error)
    if positive == "error":
        return average_precision(-c, e)
    if positive == "success":
        return average_precision(c, ~e)
    raise ValueError(f"positive must be 'error' or 'success', got {positive!r}")


def aupr_error(confidence, is_error) -> float:
    return aupr(confidence, is_error, "error")


def aupr_success(confidence, is_error) -> float:
    return aupr(confidence, is_error, "success")


def auroc(confidence, is_error) -> float:
    """Mann-Whitney U / (n_success * n_error); ties count one half."""
    c, e = as_arrays(confidence, is_error)
    _need_both(e, "AUROC")
    ok = ~e
    n_pos, n_neg = int(ok.sum()), int(e.sum())
    ranks = rankdata(c)  # average ranks for ties
    u = ranks[ok].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_95_tpr(confidence, is_error, tpr_level: float = 0.95) -> float:
    """Fraction of errors accepted at the most selective threshold retaining ``tpr_level`` of successes.

    A sample is accepted iff ``confidence >= threshold``; the threshold is the
    largest distinct confidence value whose success recall is at least
    ``tpr_level``.
    """
    c, e = as_arrays(confidence, is_error)
    _need_both(e, "FPR@95%TPR")
    ok = ~e
    thresholds = np.unique(c)[::-1]
    succ = np.sort(c[ok])
    err = np.sort(c[e])
    succ_ge = succ.size - np.searchsorted(succ, thresholds, side="left")
    tpr = succ_ge / succ.size
    first = int(np.argmax(tpr >= tpr_level))
    tau = thresholds[first]
    return float((err.size - np.searchsorted(err, tau, side="left")) / err.size)


def risk_coverage(confidence, is_error) -> list[RiskCoveragePoint]:
    """Selective risk as a function of coverage.

    One point per distinct confidence value (accept iff ``confidence >=
    threshold``), bracketed by a ``-inf`` endpoint (coverage 1, global error
    rate) and a ``+inf`` endpoint (coverage 0, risk defined as 0). Points are in
    increasing threshold order, so coverage is non-increasing.
    """
    c, e = as_arrays(confidence, is_error)
    if c.size == 0:
        raise UndefinedMetricError("risk-coverage needs at least one outcome")
    n = c.size
    order = np.argsort(c, kind="stable")
    cs, es = c[order], e[order]
    values, starts = np.unique(cs, return_index=True)
    # errors at or above each start index
    err_suffix = np.r_[np.cumsum(es[::-1])[::-1], 0]
    accepted = n - starts
    errors = err_suffix[starts]
    points = [RiskCoveragePoint(float("-inf"), 1.0, float(e.sum() / n))]
    for v, a, k in zip(values, accepted, errors):
        points.append(RiskCoveragePoint(float(v), float(a / n), float(k / a)))
    points.append(RiskCoveragePoint(float("inf"), 0.0, 0.0))
    return points


def aurc(points: list[RiskCoveragePoint]) -> float:
    """Trapezoidal area under a risk-coverage curve (lower is better)."""
    cov = np.array([p.coverage for p in points])[::-1]
    risk = np.array([p.selective_risk for p in points])[::-1]
    return float(np.trapezoid(risk, cov))


def evaluate(confidence, is_error) -> dict[str, float]:
    """All four comparison metrics, as fractions in [0, 1]."""
    return {
        "fpr_at_95_tpr": fpr_at_95_tpr(confidence, is_error),
        "aupr_error": aupr_error(confidence, is_error),
        "aupr_success": aupr_success(confidence, is_error),
        "auroc": auroc(confidence, is_error),
    }


# --------------------------------------------------------------------------
# CSV ingestion

_TRUE = {"1", "true", "t", "yes"}
_FALSE = {"0", "false", "f", "no"}


def load_outcomes_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``confidence,is_error`` CSV into arrays."""
    conf, err = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["confidence", "is_error"]:
            raise FormatError(f"{path}: expected header 'confidence,is_error', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                conf.append(float(row[0]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad confidence {row[0]!r}") from exc
            flag = row[1].strip().lower()
            if flag in _TRUE:
                err.append(True)
            elif flag in _FALSE:
                err.append(False)
            else:
                raise FormatError(f"{path}:{lineno}: bad is_error flag {row[1]!r}")
    return as_arrays(conf, err)


def write_outcomes_csv(path: str | Path, confidence, is_error) -> None:
    c, e = as_arrays(confidence, is_error)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["confidence", "is_error"])
        for ci, ei in zip(c, e):
            w.writerow([repr(float(ci)), int(ei)])
