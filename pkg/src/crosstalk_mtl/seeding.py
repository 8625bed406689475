"""Purpose-keyed random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)) and k >= 0:
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_key(k) for k in keys)])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    String keys are hashed, so e.g. model init (``"init"``) and batch
    shuffling (``"shuffle"``) never share a stream for the same seed.
    """
    return np.random.default_rng(derive_seed(seed, *keys))
