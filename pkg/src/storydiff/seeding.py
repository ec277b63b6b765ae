"""Deterministic seed derivation.

Every run holds a single root seed; each consumer of randomness derives
its own stream by hashing the root seed together with a purpose tag
(and optional indices). Streams are therefore independent and stable
across runs and platforms.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *tags) -> int:
    """Return a 64-bit sub-seed for (root, *tags).

    SHA-256 over the decimal root seed and the stringified tags, joined
    by a separator byte; the first 8 digest bytes form the sub-seed.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode("utf-8"))
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(root: int, *tags) -> np.random.Generator:
    """Generator seeded with derive_seed(root, *tags)."""
    return np.random.default_rng(derive_seed(root, *tags))
