"""Differentiable building blocks with hand-written backward passes.

Arrays are float64 numpy arrays. A layer caches what it needs during
``forward`` and consumes the cache in ``backward``, which returns the gradient
with respect to the layer input and accumulates parameter gradients into
``Parameter.grad``.

Layer modes:

* ``"train"``: dropout samples a fresh mask.
* ``"inference"``: dropout is the identity.
* ``"mc"``: evaluation-time sampling (Monte Carlo dropout); other layers
  behave as in inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, LabelError, NumericError

MODES = ("train", "inference", "mc")


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray | None = None
    name: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown layer mode {mode!r}; expected one of {MODES}")


class Layer:
    kind = "layer"

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, mode: str = "inference", rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


# --------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weights + bias`` with the bias broadcast over the batch."""
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"dense expects input[batch x in], weights[in x out], bias[out]; "
            f"got input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(f"input shape {x.shape} does not conform to weights shape {weights.shape}")
    if bias.shape[0] != weights.shape[1]:
        raise DimensionError(f"bias shape {bias.shape} does not conform to weights shape {weights.shape}")
    return x @ weights + bias


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        if in_features < 1 or out_features < 1:
            raise DimensionError(f"dense sizes must be positive, got {in_features}x{out_features}")
        # He-uniform; zeros when no generator is supplied (weights loaded later)
        if rng is None:
            w = np.zeros((in_features, out_features))
        else:
            bound = math.sqrt(6.0 / in_features)
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(out_features), name="bias")
        self._x: np.ndarray | None = None

    @property
    def in_features(self) -> int:
        return self.weight.value.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.value.shape[1]

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x, mode="inference", rng=None):
        self._x = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        x = self._x
        self.weight.accumulate(x.T @ dout)
        self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.value.T

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


# --------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="inference", rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, mode="inference", rng=None):
        self._out = sigmoid(x)
        return self._out

    def backward(self, dout):
        s = self._out
        return dout * s * (1.0 - s)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, mode="inference", rng=None):
        self._out = softmax(x)
        return self._out

    def backward(self, dout):
        p = self._out
        return p * (dout - np.sum(dout * p, axis=-1, keepdims=True))


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode="inference", rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


# --------------------------------------------------------------------------
# dropout


def dropout(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(output, mask)``; the mask is ``None`` when inactive.

    Survivors are scaled by ``1 / (1 - rate)`` so the expectation is preserved.
    """
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "inference" or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError(f"dropout in {mode!r} mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask: np.ndarray | None = None

    def forward(self, x, mode="inference", rng=None):
        out, self._mask = dropout(x, self.rate, mode, rng)
        return out

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def __repr__(self):
        return f"Dropout({self.rate})"


# --------------------------------------------------------------------------
# convolution / pooling (NCHW)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid-padding 2-D cross-correlation.

    x: (N, C, H, W); weight: (F, C, kh, kw); bias: (F,) -> (N, F, OH, OW).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"input shape {x.shape} has {c} channels but weight shape {weight.shape} expects {wc}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, F)
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise DimensionError("conv2d sizes and stride must be positive")
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            w = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(out_channels), name="bias")
        self.stride = stride

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, mode="inference", rng=None):
        self._x = x
        out = conv2d_forward(x, self.weight.value, self.bias.value, self.stride)
        self._out_hw = out.shape[2:]
        return out

    def backward(self, dout):
        x, s = self._x, self.stride
        wgt = self.weight.value
        _, _, kh, kw = wgt.shape
        oh, ow = self._out_hw
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        self.weight.accumulate(np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])))
        self.bias.accumulate(dout.sum(axis=(0, 2, 3)))
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(dout, wgt[:, :, i, j], axes=([1], [0]))  # (N, OH, OW, C)
                dx[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        return dx

    def __repr__(self):
        f, c, k, _ = self.weight.value.shape
        return f"Conv2D({c}, {f}, {k}, stride={self.stride})"


def maxpool2d(x: np.ndarray, size: int = 2, stride: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling over ``size x size`` windows; trailing rows/cols that do not fill a window are dropped.

    Returns the pooled output and the flat in-window argmax (first maximum wins).
    """
    stride = size if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    if size > x.shape[2] or size > x.shape[3]:
        raise DimensionError(f"pool size {size} larger than input {x.shape[2:]}")
    windows = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(*windows.shape[:4], size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, size: int = 2, stride: int | None = None):
        self.size = size
        self.stride = size if stride is None else stride

    def forward(self, x, mode="inference", rng=None):
        self._shape = x.shape
        out, self._arg = maxpool2d(x, self.size, self.stride)
        return out

    def backward(self, dout):
        n, c, oh, ow = dout.shape
        dx = np.zeros(self._shape)
        di, dj = np.divmod(self._arg, self.size)
        rows = np.arange(oh)[None, None, :, None] * self.stride + di
        cols = np.arange(ow)[None, None, None, :] * self.stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn_, cc, rows, cols), dout)
        return dx

    def __repr__(self):
        return f"MaxPool2D({self.size}, stride={self.stride})"


# --------------------------------------------------------------------------
# containers


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, mode="inference", rng=None):
        _check_mode(mode)
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def has_dropout(self) -> bool:
        return any(isinstance(layer, Dropout) for layer in self.layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return "Sequential(" + ", ".join(repr(layer) for layer in self.layers) + ")"


# --------------------------------------------------------------------------
# losses; each returns the scalar loss and its gradient wrt the prediction


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray


class RankingLossResult(NamedTuple):
    value: float
    grad: np.ndarray
    n_pairs: int


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> LossResult:
    """Mean negative log-probability of the true class, gradient wrt ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    p_true = probs[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        value = float(-np.mean(np.log(p_true)))
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * p_true)
    return LossResult(value, grad)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossResult:
    """Fused softmax + cross-entropy; the gradient is ``(softmax - onehot) / batch`` wrt logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    if not np.all(np.isfinite(logits)):
        raise NumericError("cross-entropy received non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p_true = z[np.arange(n), labels] - log_norm
    p = np.exp(z - log_norm[:, None])
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return LossResult(float(-np.mean(log_p_true)), grad / n)


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction length {pred.size} does not match target length {target.size}")
    if pred.size == 0:
        raise DimensionError("loss needs at least one sample")
    return pred, target


def mse_loss(pred: np.ndarray, target: np.ndarray) -> LossResult:
    pred, target = _check_pair(pred, target)
    diff = pred - target
    return LossResult(float(np.mean(diff * diff)), 2.0 * diff / pred.size)


BCE_CLAMP = 1e-7


def bce_loss(pred: np.ndarray, target: np.ndarray, clamp: float = BCE_CLAMP) -> LossResult:
    """Binary cross-entropy; target 1 marks a correct prediction.

    ``pred`` is clamped to ``[clamp, 1 - clamp]``; the gradient is zero where the
    clamp is active.
    """
    pred, target = _check_pair(pred, target)
    c = np.clip(pred, clamp, 1.0 - clamp)
    n = pred.size
    value = -np.mean(target * np.log(c) + (1.0 - target) * np.log(1.0 - c))
    grad = (-(target / c) + (1.0 - target) / (1.0 - c)) / n
    grad = np.where((pred > clamp) & (pred < 1.0 - clamp), grad, 0.0)
    return LossResult(float(value), grad)


def focal_loss(pred: np.ndarray, target: np.ndarray, gamma: float = 2.0, clamp: float = BCE_CLAMP) -> LossResult:
    """BCE reweighted by ``(1 - p_t) ** gamma``; ``gamma = 0`` is plain BCE."""
    pred, target = _check_pair(pred, target)
    if gamma < 0:
        raise ConfigError(f"focal gamma must be non-negative, got {gamma}")
    c = np.clip(pred, clamp, 1.0 - clamp)
    n = pred.size
    pt = np.where(target > 0.5, c, 1.0 - c)
    log_pt = np.log(pt)
    w = (1.0 - pt) ** gamma
    value = -np.mean(w * log_pt)
    # d/dpt of -(1-pt)^g log pt
    if gamma == 0:
        dpt = -1.0 / pt
    else:
        dpt = gamma * (1.0 - pt) ** (gamma - 1.0) * log_pt - w / pt
    sign = np.where(target > 0.5, 1.0, -1.0)
    grad = dpt * sign / n
    grad = np.where((pred > clamp) & (pred < 1.0 - clamp), grad, 0.0)
    return LossResult(float(value), grad)


def ranking_loss(pred: np.ndarray, correct: np.ndarray, margin: float = 0.1) -> RankingLossResult:
    """Mean pairwise hinge over every in-batch (correct, incorrect) pair.

    Each pair contributes ``max(0, margin - (c_correct - c_incorrect))``. A batch
    without any such pair yields zero loss and ``n_pairs == 0``.
    """
    pred, correct = _check_pair(pred, correct)
    ok = correct > 0.5
    pos, neg = pred[ok], pred[~ok]
    n_pairs = pos.size * neg.size
    grad = np.zeros_like(pred)
    if n_pairs == 0:
        return RankingLossResult(0.0, grad, 0)
    hinge = margin - (pos[:, None] - neg[None, :])
    active = hinge > 0
    value = float(np.sum(np.where(active, hinge, 0.0)) / n_pairs)
    grad[ok] = -active.sum(axis=1) / n_pairs
    grad[~ok] = active.sum(axis=0) / n_pairs
    return RankingLossResult(value, grad, n_pairs)


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    """Base optimizer. ``step`` updates every parameter holding a gradient, then clears gradients.

    Parameters whose ``grad`` is ``None`` (not touched by the last backward
    pass) are left unchanged, including their state buffers.
    """

    def __init__(self, params: Sequence[Parameter], learning_rate: float):
        if not learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None:
                self._update(i, p)
        self.zero_grad()

    def _update(self, i: int, p: Parameter) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd-momentum"

    def __init__(self, params, learning_rate: float = 0.01, momentum: float = 0.9):
        super().__init__(params, learning_rate)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def _update(self, i, p):
        v = self.velocity[i]
        v *= self.momentum
        v += p.grad
        p.value -= self.learning_rate * v


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = [0] * len(self.params)

    def _update(self, i, p):
        g = p.grad
        self.t[i] += 1
        t = self.t[i]
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
        m_hat = self.m[i] / (1.0 - self.beta1 ** t)
        v_hat = self.v[i] / (1.0 - self.beta2 ** t)
        p.value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params: Sequence[Parameter], learning_rate: float, **hyper) -> Optimizer:
    if kind in ("sgd", "sgd-momentum"):
        return SGD(params, learning_rate, **hyper)
    if kind == "adam":
        return Adam(params, learning_rate, **hyper)
    raise ConfigError(f"unknown optimizer {kind!r}")


@dataclass
class ParamSnapshot:
    """Deep copy of parameter values, used for early-stopping restore."""

    values: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def take(cls, params: Sequence[Parameter]) -> "ParamSnapshot":
        return cls([p.value.copy() for p in params])

    def restore(self, params: Sequence[Parameter]) -> None:
        for p, v in zip(params, self.values):
            p.value[...] = v
