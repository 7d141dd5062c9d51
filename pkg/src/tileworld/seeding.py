"""Deterministic seed derivation.

A single master seed fans out to per-tile, per-attempt and per-blend seeds
through a splitmix-style mixing chain, so that builds are reproducible across
platforms and interrupted builds resume bit-identically.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One output of the splitmix64 generator for a given state."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _word(part) -> int:
    if isinstance(part, bool):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    if isinstance(part, (tuple, list)):
        acc = 0x5BD1E995
        for sub in part:
            acc = splitmix64(acc ^ _word(sub))
        return acc
    raise TypeError(f"cannot derive a seed from {type(part).__name__}")


def derive_seed(master: int, *parts) -> int:
    """Mix a master seed with arbitrary ints/strings/tuples into a u64 seed."""
    state = splitmix64(int(master) & _MASK64)
    for part in parts:
        state = splitmix64(state ^ _word(part))
    return state


def rng_for(master: int, *parts) -> np.random.Generator:
    """A Philox-backed generator keyed by ``derive_seed(master, *parts)``."""
    return np.random.Generator(np.random.Philox(derive_seed(master, *parts)))
