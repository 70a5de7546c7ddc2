"""Seeded random streams.

All randomness goes through numpy's PCG64 generator. A run seed plus a stream
name identifies one independent stream, so adding a new consumer never shifts
the draws seen by an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *streams: str | int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *streams)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in streams:
        words.append(stream_key(s) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
