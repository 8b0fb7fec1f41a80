"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`make_rng` so that a
single experiment seed plus a stream path fully determines the numbers.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _stream_key(part) -> int:
    if isinstance(part, str):
        return fnv1a64(part.encode("utf-8")) & 0xFFFFFFFF
    part = int(part)
    if part < 0:
        raise ValueError(f"stream ids must be non-negative, got {part}")
    return part


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator for ``seed`` split by the stream path ``stream``.

    Stream parts may be non-negative ints or strings; two different paths
    give statistically independent generators.
    """
    key = tuple(_stream_key(p) for p in stream)
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
