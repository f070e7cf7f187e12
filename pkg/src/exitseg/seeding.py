"""Deterministic seed splitting.

Every consumer of randomness receives a generator derived from the single
run seed plus a tuple of keys, ``numpy.random.SeedSequence([seed, *keys])``.
String keys are mapped through CRC-32 so derivation is stable across
processes (unlike ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("seed keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)]))
