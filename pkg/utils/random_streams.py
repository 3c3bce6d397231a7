"""Counter-based random streams keyed by (master seed, *keys)."""

import hashlib

import numpy as np


def _key_word(key) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """
    Independent Philox generator for a (seed, keys...) tuple.

    The same tuple always yields the same sequence no matter which other
    streams were drawn before, so per-user simulation can run in any order.
    """
    entropy = [int(seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
