"""Counter-based random streams.

Every random draw in the package flows through a Philox generator keyed by
(seed, *tags). Streams with different tags are statistically independent and
the mapping is stable across runs and platforms, so any stage can be re-run
in isolation and reproduce its draws bit-exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *tags) -> int:
    """128-bit Philox key from a root seed and a sequence of hashable tags."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(t) for t in tags)).encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the given (seed, tags) combination."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *tags)))


def derive_seed(seed: int, *tags) -> int:
    """63-bit integer seed derived from (seed, tags), usable as a new root."""
    return derive_key(seed, *tags) & 0x7FFFFFFFFFFFFFFF
