"""Splittable deterministic seeding.

Every stochastic stage derives its seed as ``hash64(parent_seed, *labels)``
so that per-sample and per-stage randomness is reproducible and independent
of generation order.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(h: int) -> int:
    h &= _MASK
    h = (h + 0x9E3779B97F4A7C15) & _MASK
    z = h
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def hash64(*parts: int | str) -> int:
    """Fold integers and strings into a single 64-bit seed."""
    h = 0x853C49E6748FEA9B
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h = _splitmix64(h ^ (int(part) & _MASK))
        elif isinstance(part, str):
            for chunk_start in range(0, len(part), 8):
                chunk = part[chunk_start : chunk_start + 8].encode("utf-8")
                h = _splitmix64(h ^ int.from_bytes(chunk, "little"))
        else:
            raise TypeError(f"hash64 accepts ints and strings, got {type(part).__name__}")
    return h


def make_rng(*parts: int | str) -> np.random.Generator:
    """PCG64 generator seeded from hash64(*parts)."""
    return np.random.default_rng(hash64(*parts))
