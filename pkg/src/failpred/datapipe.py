"""Dataset ingestion, synthetic data, splitting and batching."""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, LabelError, LengthError
from .rng import make_rng

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

# IDX type byte -> big-endian numpy dtype
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DimensionError(f"labels must be 1-D, got shape {self.labels.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"features hold {self.features.shape[0]} samples but labels hold {self.labels.shape[0]}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx: np.ndarray, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.num_classes,
            name or self.name, dict(self.provenance),
        )


# --------------------------------------------------------------------------
# IDX


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def decode_idx(raw: bytes) -> np.ndarray:
    """Decode an in-memory IDX buffer into an array with its native dtype."""
    if len(raw) < 4:
        raise LengthError(f"IDX header truncated: {len(raw)} bytes")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES or raw[3] == 0:
        raise FormatError(f"bad IDX magic: observed bytes {raw[:4].hex(' ')}")
    dtype = _IDX_DTYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"IDX header truncated: need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + math.prod(dims) * dtype.itemsize
    if len(raw) != expected:
        raise LengthError(f"IDX payload length mismatch: expected {expected} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def parse_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed).

    Label files (magic ``00 00 08 01``) come back as int64 class indices. 3-D
    uint8 image files (magic ``00 00 08 03``) come back as float64 of shape
    ``(N, 1, H, W)`` scaled to [0, 1]. Any other IDX type is returned as
    decoded.
    """
    raw = _open_bytes(Path(path))
    arr = decode_idx(raw)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_LABELS_MAGIC:
        return arr.astype(np.int64)
    if magic == IDX_IMAGES_MAGIC:
        return (arr.astype(np.float64) / 255.0)[:, None, :, :]
    return arr.astype(arr.dtype.newbyteorder("="))


def encode_idx(arr: np.ndarray) -> bytes:
    """Inverse of :func:`decode_idx` for the IDX-representable dtypes."""
    arr = np.asarray(arr)
    for code, dt in _IDX_DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
            return header + arr.astype(dt).tobytes()
    raise FormatError(f"dtype {arr.dtype} has no IDX encoding")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path | None:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / candidate
        if p.exists():
            return p
    return None


def find_mnist(directory: str | Path) -> dict[str, tuple[Path, Path]] | None:
    """Locate the four MNIST IDX files in ``directory``; ``None`` if any is missing."""
    directory = Path(directory)
    found = {}
    for part, (img, lab) in MNIST_FILES.items():
        pi, pl = _find(directory, img), _find(directory, lab)
        if pi is None or pl is None:
            return None
        found[part] = (pi, pl)
    return found


def load_mnist(directory: str | Path, part: str = "train") -> LabeledDataset:
    files = find_mnist(directory)
    if files is None:
        raise FileNotFoundError(f"MNIST IDX files not found in {directory}")
    img_path, lab_path = files[part]
    images = parse_idx(img_path)
    labels = parse_idx(lab_path)
    if images.shape[0] != labels.shape[0]:
        raise DimensionError(f"{img_path.name} holds {images.shape[0]} images but {lab_path.name} holds {labels.shape[0]} labels")
    provenance = {
        "files": [
            {"path": str(img_path), "sha256": sha256_file(img_path)},
            {"path": str(lab_path), "sha256": sha256_file(lab_path)},
        ]
    }
    return LabeledDataset(images, labels, 10, f"mnist-{part}", provenance)


# --------------------------------------------------------------------------
# synthetic


def synth_blobs(num_classes: int, n_per_class: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters with means ``k * e_1`` (unit spacing along the first axis).

    Larger ``spread`` raises the Bayes error, so classifiers make a controllable
    number of mistakes.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if not spread > 0:
        raise ConfigError(f"spread must be > 0, got {spread}")
    rng = make_rng(seed, "synth_blobs")
    means = np.zeros((num_classes, dim))
    means[:, 0] = np.arange(num_classes, dtype=np.float64)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    provenance = {"generator": {"kind": "synth_blobs", "num_classes": num_classes, "n_per_class": n_per_class,
                                "dim": dim, "spread": spread, "seed": seed}}
    return LabeledDataset(x[order], labels[order], num_classes, "synth_blobs", provenance)


# --------------------------------------------------------------------------
# preprocessing


def standardize(train: LabeledDataset, *others: LabeledDataset) -> list[LabeledDataset]:
    """Per-channel (images) or per-feature standardisation with statistics taken from ``train``."""
    x = train.features
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    out = []
    for d in (train, *others):
        out.append(LabeledDataset((d.features - mean) / std, d.labels, d.num_classes, d.name, dict(d.provenance)))
    return out


def random_shift(images: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Shift each (N, C, H, W) image by up to ``max_shift`` pixels per axis, zero-filling the border."""
    if max_shift <= 0:
        return images
    n, _, h, w = images.shape
    out = np.zeros_like(images)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[i, :, yd, xd] = images[i, :, ys, xs]
    return out


# --------------------------------------------------------------------------
# splitting / batching


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    val_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.val_fraction < 0.0:
            raise ConfigError(f"val_fraction must be non-negative, got {self.val_fraction}")
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12:
            raise ConfigError("train_fraction + val_fraction must not exceed 1")


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_val = int(math.floor(spec.val_fraction * n + 1e-9))
    n_train = min(n - n_val, int(math.floor(spec.train_fraction * n + 1e-9)))
    return n_train, n_val, n - n_train - n_val


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Partition into (train, val, test) with a seeded permutation. Folds may be empty."""
    n = len(dataset)
    n_train, n_val, _ = split_sizes(n, spec)
    perm = make_rng(spec.seed, "split").permutation(n)
    train = dataset.subset(np.sort(perm[:n_train]), f"{dataset.name}/train")
    val = dataset.subset(np.sort(perm[n_train:n_train + n_val]), f"{dataset.name}/val")
    test = dataset.subset(np.sort(perm[n_train + n_val:]), f"{dataset.name}/test")
    return train, val, test


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else make_rng(shuffle_seed, "batches").permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(fold: LabeledDataset, batch_size: int, shuffle_seed: int | None = None
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(features, labels)`` batches covering ``fold`` exactly once; the last may be short."""
    for idx in batch_indices(len(fold), batch_size, shuffle_seed):
        yield fold.features[idx], fold.labels[idx]
