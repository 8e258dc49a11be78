"""Seed splitting.

Every random stream derives from one 64-bit run seed through
``SeedSequence(seed, spawn_key=(chain, purpose))``.  Purposes are fixed
integers so adding a new consumer never perturbs existing streams.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "chain": 0,
    "pilot": 1,
    "replicate": 2,
    "holdout": 3,
    "simulate": 4,
    "truncation": 5,
    "validate": 6,
    "geweke": 7,
}


def stream(seed: int, purpose: str = "chain", chain: int = 0) -> np.random.Generator:
    if seed is None:
        raise ValueError("an explicit seed is required")
    key = (int(chain), PURPOSES[purpose])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
