"""Named random streams derived from one 64-bit seed.

Every source of randomness in a run (weight init, corpus generation, window
shuffling) pulls from its own named stream, so components can be reseeded
independently while the whole run stays a pure function of the root seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for stream `name` under root `seed`; stable across runs and platforms."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *words])))
