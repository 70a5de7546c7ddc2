"""Independent reference implementations used as test oracles.

Nothing here imports the code under test: metrics are recomputed by explicit
threshold enumeration / pair counting, gradients by central differences, and
nearest neighbours by an all-pairs scan.
"""

from __future__ import annotations

import math

import numpy as np

FD_STEP = 1e-5


# --------------------------------------------------------------------------
# finite differences


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is perturbed in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-10:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


# --------------------------------------------------------------------------
# metrics, by brute-force threshold enumeration


def pr_sweep_ap(scores, positive) -> float:
    """Average precision: flag every sample with score >= t for each distinct t, highest first."""
    scores = list(map(float, scores))
    positive = list(map(bool, positive))
    n_pos = sum(positive)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        flagged = [p for s, p in zip(scores, positive) if s >= t]
        tp = sum(flagged)
        precision = tp / len(flagged)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def aupr_error_oracle(conf, is_error) -> float:
    return pr_sweep_ap([-c for c in conf], is_error)


def aupr_success_oracle(conf, is_error) -> float:
    return pr_sweep_ap(conf, [not e for e in is_error])


def auroc_oracle(conf, is_error) -> float:
    """P(success scores above error) + 1/2 P(tie), by counting every pair."""
    succ = [c for c, e in zip(conf, is_error) if not e]
    err = [c for c, e in zip(conf, is_error) if e]
    wins = 0.0
    for s in succ:
        for f in err:
            wins += 1.0 if s > f else 0.5 if s == f else 0.0
    return wins / (len(succ) * len(err))


def fpr95_oracle(conf, is_error) -> float:
    """Enumerate thresholds from the top; stop at the first whose success recall reaches 95%."""
    succ = [c for c, e in zip(conf, is_error) if not e]
    err = [c for c, e in zip(conf, is_error) if e]
    for t in sorted(set(conf), reverse=True):
        tpr = sum(s >= t for s in succ) / len(succ)
        if tpr >= 0.95:
            return sum(f >= t for f in err) / len(err)
    raise AssertionError("unreachable: the lowest threshold accepts everything")


def risk_coverage_oracle(conf, is_error) -> list[tuple[float, float, float]]:
    n = len(conf)
    pts = [(-math.inf, 1.0, sum(is_error) / n)]
    for t in sorted(set(conf)):
        acc = [e for c, e in zip(conf, is_error) if c >= t]
        pts.append((t, len(acc) / n, sum(acc) / len(acc)))
    pts.append((math.inf, 0.0, 0.0))
    return pts


def random_outcomes(rng: np.random.Generator, max_n: int = 200, ties: bool | None = None):
    """Random (confidence, is_error) set with both classes present; half the draws are tie-heavy."""
    n = int(rng.integers(2, max_n + 1))
    signal = rng.random() < 0.5
    err = rng.random(n) < rng.uniform(0.05, 0.95)
    err[0], err[1] = True, False
    rng.shuffle(err)
    if ties is None:
        ties = rng.random() < 0.5
    conf = rng.integers(0, 8, n) / 8.0 if ties else rng.random(n)
    # mild signal so curves are not pure noise
    conf = np.where(err, conf * rng.uniform(0.5, 1.0), conf) if signal else conf
    return conf.astype(np.float64), err


# --------------------------------------------------------------------------
# nearest neighbours


def all_pairs_nearest(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        out[i] = min(math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, q))) for p in points)
    return out


def trustscore_oracle(class_points: list[np.ndarray], queries: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    d = np.stack([all_pairs_nearest(p, queries) for p in class_points], axis=1)
    out = np.empty(len(queries))
    for i, c in enumerate(predicted):
        other = min(d[i, j] for j in range(len(class_points)) if j != c)
        out[i] = other / max(d[i, c], 1e-12)
    return out
