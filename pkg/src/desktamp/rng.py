"""Seed derivation for reproducible stage-local randomness.

Every randomized kernel takes an explicit 64-bit seed; nothing reads global
RNG state. Sub-seeds are derived with a splitmix64 chain so each pipeline
stage can be re-run in isolation with the same stream it saw in a full run.
"""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 step; returns the mixed output for ``state``."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(seed, *tags):
    """Mix ``seed`` with string/int tags into a new 64-bit sub-seed."""
    state = seed & _MASK
    for tag in tags:
        if isinstance(tag, str):
            for byte in tag.encode("utf-8"):
                state = splitmix64(state ^ byte)
        else:
            state = splitmix64(state ^ (int(tag) & _MASK))
    return splitmix64(state)


def generator(seed, *tags):
    """PCG64 generator seeded from ``derive_seed(seed, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
