"""Named random streams derived from one master seed.

``derive_rng(seed, "eval-chain", 17)`` always yields the same generator no
matter what else has been drawn, so work can be split or reordered freely.
"""
from __future__ import annotations

import os
import zlib

import numpy as np

ENV_SEED = "DEER_SEED"


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def master_seed(default: int) -> int:
    """``DEER_SEED`` from the environment wins over ``default``."""
    raw = os.environ.get(ENV_SEED)
    return int(raw) if raw not in (None, "") else int(default)
