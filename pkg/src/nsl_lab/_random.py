"""Seeded, splittable random streams.

Every consumer derives its own Philox stream from ``(seed, *keys)`` so the
values it draws never depend on how many numbers other consumers took, or in
what order samples are generated.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent Philox generator for ``seed`` and a tuple of stream keys."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
