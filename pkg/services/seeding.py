"""
Labelled PRNG streams

One independent generator per (purpose, seed) pair; draws in one stream
never shift another.
"""
import hashlib

import numpy as np


def stream_entropy(purpose: str, seed: int, *context) -> int:
    """Stable 128-bit integer for a labelled context"""
    label = '|'.join([purpose, str(int(seed))] + [str(c) for c in context])
    digest = hashlib.sha256(label.encode()).digest()
    return int.from_bytes(digest[:16], 'little')


def rng_for(purpose: str, seed: int, *context) -> np.random.Generator:
    """Generator for the given purpose label, seed and optional sub-context"""
    return np.random.default_rng(np.random.SeedSequence(stream_entropy(purpose, seed, *context)))
