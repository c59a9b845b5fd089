"""Deterministic seed derivation.

One user-facing seed fans out into independent per-component streams via a
splitmix64 finalizer chained over label bytes:

    child = mix(... mix(mix(seed) ^ byte0) ^ byte1 ...)

Equal (seed, labels) always yield the same child seed, and distinct labels
give statistically independent streams, so any part of a run can be
reproduced in isolation.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _mix(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a 64-bit child seed from a master seed and a label path."""
    x = _mix(seed & _MASK)
    for label in labels:
        for byte in str(label).encode("utf-8"):
            x = _mix(x ^ byte)
    return x


def rng_from(seed: int, *labels: object) -> np.random.Generator:
    """A numpy Generator seeded by the derived child seed."""
    return np.random.default_rng(derive_seed(seed, *labels))
