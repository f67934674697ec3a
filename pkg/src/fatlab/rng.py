"""Keyed, counter-based random streams.

Every random draw in a run is taken from a Philox stream keyed by
``(seed, epoch, batch, purpose)``, so any single draw can be replayed without
replaying the ones before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_code(purpose: str | int) -> int:
    if isinstance(purpose, int):
        return purpose
    return zlib.crc32(purpose.encode())


def keyed_rng(seed: int, *key: str | int) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF] + [_purpose_code(k) & 0xFFFFFFFF for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
