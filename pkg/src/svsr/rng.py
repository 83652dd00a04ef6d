"""Deterministic named random streams.

Every source of randomness in the package (weight init, dropout masks, data
shuffling, synthetic textures) draws from its own counter-based stream keyed
by a (seed, name) pair, so runs are bit-reproducible and adding a consumer
never perturbs the draws of another.
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent Philox generator for (seed, name).

    The 256-bit Philox key is derived by hashing the pair, so streams for
    distinct names never overlap and do not depend on creation order.
    """
    digest = hashlib.sha256(f"{seed}\x00{name}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
