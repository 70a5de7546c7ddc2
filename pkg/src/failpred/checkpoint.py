"""Two-file checkpoint format.

``<stem>.json`` is the manifest: format tag, model description, seed and the
ordered list of tensors with their shapes. ``<stem>.bin`` is the blob: the
8-byte magic ``b"FPCKPT01"`` followed by every tensor, in manifest order, as
raw little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import DependencyError, FormatError, LengthError

BLOB_MAGIC = b"FPCKPT01"
FORMAT_TAG = "failpred-checkpoint"
FORMAT_VERSION = 1


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def params_hash(arrays: Sequence[np.ndarray]) -> str:
    """SHA-256 over the float64 bytes of ``arrays``; any bit change alters it."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_checkpoint(path: str | Path, manifest: dict[str, Any], tensors: Sequence[tuple[str, np.ndarray]]) -> dict:
    json_path, bin_path = checkpoint_paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray(BLOB_MAGIC)
    entries = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        blob += arr.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape)})
    blob = bytes(blob)
    full = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        **manifest,
        "dtype": "<f4",
        "tensors": entries,
        "blob": bin_path.name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    bin_path.write_bytes(blob)
    json_path.write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return full


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], list[np.ndarray]]:
    """Load and validate a checkpoint. Returns the manifest and float64 tensors in manifest order."""
    json_path, bin_path = checkpoint_paths(path)
    if not json_path.exists() or not bin_path.exists():
        raise DependencyError(f"checkpoint not found: {json_path} / {bin_path}")
    try:
        manifest = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest {json_path} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG or manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{json_path} is not a {FORMAT_TAG} v{FORMAT_VERSION} manifest")
    blob = bin_path.read_bytes()
    if blob[:len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise FormatError(f"bad checkpoint blob magic in {bin_path}: observed {blob[:len(BLOB_MAGIC)]!r}")
    shapes = [tuple(t["shape"]) for t in manifest["tensors"]]
    expected = len(BLOB_MAGIC) + 4 * sum(math.prod(s) for s in shapes)
    if len(blob) != expected:
        raise LengthError(f"checkpoint blob {bin_path} holds {len(blob)} bytes but the manifest implies {expected}")
    out = []
    offset = len(BLOB_MAGIC)
    for s in shapes:
        count = math.prod(s)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(s)
        out.append(arr)
        offset += 4 * count
    return manifest, out


def assign(params, arrays: Sequence[np.ndarray], where: str = "checkpoint") -> None:
    """Copy ``arrays`` into ``params``; shapes must agree one-to-one."""
    params = list(params)
    if len(params) != len(arrays):
        raise LengthError(f"{where}: architecture expects {len(params)} tensors, manifest lists {len(arrays)}")
    for p, a in zip(params, arrays):
        if p.value.shape != a.shape:
            raise LengthError(f"{where}: tensor shape {a.shape} does not match architecture shape {p.value.shape}")
        p.value = a.copy()
