"""Deterministic RNG derivation.

Every random draw in the package comes from a generator derived here, so
a run is a pure function of its base seed. String keys are folded to
integers with crc32 (stable across processes, unlike ``hash``).
"""

import zlib

import numpy as np


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream identified by (seed, *keys).

    Keys may be ints or strings; the same tuple always yields the same
    stream, distinct tuples yield independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
