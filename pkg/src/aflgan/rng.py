"""Splittable, counter-based random streams.

Every consumer (weight init, data sampling, noise, penalty interpolation, ...)
gets its own stream derived from a root seed and a string label, so adding a
new consumer never shifts the draws of an existing one.  Streams addressed by
an extra integer index (typically the training iteration) are stateless:
stream(seed, "noise", 1234) always yields the same draws, which makes runs
resumable and trivially parallel.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "stream"]


def derive_key(seed: int, label: str, index: int = 0) -> int:
    """Derive a 128-bit child key from (seed, label, index).

    Collision-resistant and platform-independent; the Philox counter-based
    generator underneath makes draws reproducible across runs.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(label.encode("utf-8"))
    h.update(int(index).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one consumer at one index."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, label, index)))
