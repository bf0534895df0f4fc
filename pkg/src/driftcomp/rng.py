"""Deterministic seed derivation.

Every stochastic component takes an explicit 64-bit seed. Child seeds are
derived from a base seed plus a label path (strings hashed with crc32, ints
used as-is) through numpy's SeedSequence, so independent streams never
collide and runs replay bit-identically regardless of call order.
"""

import zlib

import numpy as np


def child_seed(base: int, *path: int | str) -> int:
    """Derive a stable 64-bit child seed from ``base`` and a label path."""
    key = tuple(
        p if isinstance(p, int) else zlib.crc32(p.encode("utf-8")) for p in path
    )
    seq = np.random.SeedSequence(entropy=int(base), spawn_key=key)
    return int(seq.generate_state(1, np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG construction used in the package."""
    return np.random.default_rng(int(seed))
