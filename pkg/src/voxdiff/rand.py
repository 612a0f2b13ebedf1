"""Deterministic counter-based RNG streams.

Every random draw in the package comes from rng_for(seed, *key) where the
key names the consumer (e.g. ("t", global_step) or ("scene", index)).
Streams are independent, order-free, and reproducible, so resuming
training or parallelizing scene generation cannot change the numbers.
"""
import hashlib

import numpy as np


def _as_word(k):
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    h = hashlib.sha256(str(k).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "little")


def rng_for(seed, *key):
    """Generator for the stream named by (seed, key...)."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_as_word(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(words))
