"""Deterministic RNG derivation.

Every random decision in the pipeline draws from a generator derived from a
tuple of integer keys (global seed, purpose, epoch, index, ...), so any run
is a pure function of its seed and any step can be replayed in isolation.
"""

from __future__ import annotations

import numpy as np

# Stable purpose identifiers; never reorder, only append.
PURPOSES = {
    "init": 1,
    "order": 2,
    "augment": 3,
    "mask": 4,
    "corrupt": 5,
    "data": 6,
    "droppath": 7,
    "probe": 8,
}


def rng_for(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator keyed by (seed, purpose, *keys); same inputs, same stream."""
    entropy = (int(seed), PURPOSES[purpose]) + tuple(int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
