"""Reference confidence estimators: MC dropout and TrustScore."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .classifier import TrainedClassifier
from .criteria import entropy_confidence
from .errors import ConfigError, DimensionError, FitError, LabelError
from .gradcore import Dropout, softmax
from .rng import make_rng

# --------------------------------------------------------------------------
# Monte Carlo dropout


@dataclass(frozen=True)
class McDropoutConfig:
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError(f"MC dropout needs at least one sample, got {self.samples}")


def mc_mean_distribution(model: TrainedClassifier, x: np.ndarray, config: McDropoutConfig,
                         batch_size: int = 2048) -> np.ndarray:
    """Average of ``samples`` softmax vectors with dropout sampling active."""
    layers = model.network.layers
    first = next((i for i, layer in enumerate(layers) if isinstance(layer, Dropout)), None)
    if first is None:
        raise ConfigError("MC dropout requires a model with at least one dropout layer")
    x = model._check_input(x)
    rng = make_rng(config.seed, "mcdropout")
    out = []
    for start in range(0, len(x), batch_size):
        h = x[start:start + batch_size]
        # the part before the first dropout layer is deterministic: run it once
        for layer in layers[:first]:
            h = layer.forward(h, "inference")
        acc = np.zeros((len(h), model.spec.num_classes))
        for _ in range(config.samples):
            z = h
            for layer in layers[first:]:
                z = layer.forward(z, "mc", rng)
            acc += softmax(z)
        out.append(acc / config.samples)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def mcdropout_confidence(model: TrainedClassifier, x: np.ndarray, config: McDropoutConfig | None = None
                         ) -> np.ndarray:
    """Entropy confidence of the MC-averaged predictive distribution."""
    return entropy_confidence(mc_mean_distribution(model, x, config or McDropoutConfig()))


# --------------------------------------------------------------------------
# nearest-neighbour search


def brute_force_nn(points: np.ndarray, queries: np.ndarray, chunk: int = 512, refine: int = 4) -> np.ndarray:
    """Exact Euclidean distance from each query to its nearest point.

    Candidates come from the expanded ``|a|^2 + |b|^2 - 2ab`` form; the best
    ``refine`` of them are re-measured directly so cancellation cannot leak
    into the returned distance.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    pn = np.einsum("ij,ij->i", points, points)
    m = min(refine, len(points))
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = pn[None, :] - 2.0 * (q @ points.T) + np.einsum("ij,ij->i", q, q)[:, None]
        cand = np.argpartition(d2, m - 1, axis=1)[:, :m] if m < len(points) else np.broadcast_to(
            np.arange(len(points)), (len(q), len(points)))
        diff = points[cand] - q[:, None, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).min(axis=1)
    return out


class _NNIndex:
    def __init__(self, points: np.ndarray, backend: str):
        self.points = points
        self.backend = backend
        self.tree = cKDTree(points) if backend == "kdtree" else None

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        if self.tree is not None:
            return self.tree.query(queries, k=1)[0]
        return brute_force_nn(self.points, queries)


def _pick_backend(backend: str, dim: int) -> str:
    if backend == "auto":
        return "kdtree" if dim <= 16 else "brute"
    if backend not in ("kdtree", "brute"):
        raise ConfigError(f"unknown nearest-neighbour backend {backend!r}")
    return backend


# --------------------------------------------------------------------------
# TrustScore

TRUST_EPS = 1e-12


@dataclass
class TrustScoreIndex:
    class_points: list[np.ndarray]
    k: int = 10
    alpha: float = 0.0
    backend: str = "auto"
    _indexes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        dim = self.class_points[0].shape[1]
        chosen = _pick_backend(self.backend, dim)
        self._indexes = [_NNIndex(p, chosen) for p in self.class_points]

    @property
    def num_classes(self) -> int:
        return len(self.class_points)

    def class_distances(self, x: np.ndarray) -> np.ndarray:
        """(N, K) distance from each query to the nearest retained point of each class."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.class_points[0].shape[1]:
            raise DimensionError(f"query width {x.shape[1]} does not match index width {self.class_points[0].shape[1]}")
        return np.stack([idx.nearest(x) for idx in self._indexes], axis=1)


def knn_radius(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest *other* point."""
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k + 1)
    return d[:, -1] if d.ndim == 2 else d


def trustscore_fit(features: np.ndarray, labels: np.ndarray, k: int = 10, alpha: float = 0.0,
                   num_classes: int | None = None, backend: str = "auto") -> TrustScoreIndex:
    """Index per-class point sets, dropping the ``alpha`` fraction of lowest-density points per class.

    Density is measured by the k-NN radius; each class keeps
    ``ceil((1 - alpha) * n_class)`` points with the smallest radius.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise DimensionError(f"features {features.shape} and labels {labels.shape} do not align")
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    sets = []
    for c in range(num_classes):
        pts = features[labels == c]
        if len(pts) == 0:
            raise FitError(f"class {c} has no points")
        if alpha > 0:
            if len(pts) <= k:
                raise FitError(f"class {c} has {len(pts)} points; density filtering with k={k} needs more than k")
            keep = math.ceil((1.0 - alpha) * len(pts) - 1e-9)
            if keep < 1:
                raise FitError(f"filtering emptied class {c}")
            order = np.argsort(knn_radius(pts, k), kind="stable")[:keep]
            pts = pts[np.sort(order)]
        sets.append(pts)
    return TrustScoreIndex(sets, k, alpha, backend)


def trustscore(index: TrustScoreIndex, x: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Distance to the nearest other class over distance to the predicted class.

    The denominator is floored at 1e-12 so queries sitting on a predicted-class
    point stay finite.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    predicted = np.atleast_1d(np.asarray(predicted)).astype(np.int64)
    if predicted.shape != (len(x),):
        raise DimensionError(f"{len(x)} queries but {predicted.size} predicted classes")
    if predicted.size and (predicted.min() < 0 or predicted.max() >= index.num_classes):
        raise LabelError(f"predicted class outside the {index.num_classes} indexed classes")
    if index.num_classes < 2:
        raise FitError("TrustScore needs at least two indexed classes")
    d = index.class_distances(x)
    rows = np.arange(len(x))
    d_pred = d[rows, predicted]
    other = d.copy()
    other[rows, predicted] = np.inf
    d_other = other.min(axis=1)
    return d_other / np.maximum(d_pred, TRUST_EPS)
