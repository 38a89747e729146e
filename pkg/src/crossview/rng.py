"""Deterministic derivation of independent random streams.

Every stochastic piece of the system (parameter init, data synthesis, view
jitter, dropout masks, batch order) pulls from its own substream keyed by a
label path, so adding or removing one consumer never shifts the draws seen by
another.
"""

import zlib

import numpy as np


def substream(seed: int, *key) -> np.random.Generator:
    """Return a Generator derived from ``seed`` and a path of labels.

    Labels may be ints or strings; strings are CRC-hashed so the same label
    always maps to the same stream on every platform.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for part in key:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
