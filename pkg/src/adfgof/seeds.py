"""Replication seed derivation.

Replication ``i`` of an experiment seeded with ``seed`` uses
``derive_seed(seed, i)``: the splitmix64 finalizer applied to
``seed + (i + 1) * 0x9E3779B97F4A7C15 (mod 2^64)``.  Seeds depend only on
(seed, i), so shrinking or growing m leaves the common replications intact and
the result does not depend on how replications are split across workers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(seed: int, i: int) -> int:
    return splitmix64((int(seed) + (int(i) + 1) * _GOLDEN) & _MASK)


def rep_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, i))
