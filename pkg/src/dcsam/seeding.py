"""Deterministic randomness.

All randomness in the package flows from one 64-bit master seed. Derived
streams use a counter-based generator (Philox) keyed through SeedSequence,
so any (seed, label, index...) tuple maps to an independent, reproducible
stream regardless of draw order elsewhere.
"""
from __future__ import annotations

import numpy as np

# Stable numeric tags for derivation labels. Strings are not fed to
# SeedSequence directly so the mapping cannot drift with hashing changes.
_TAGS = {
    "support": 1,
    "query": 2,
    "encoder": 3,
    "params": 4,
    "train": 5,
    "eval": 6,
    "tube": 7,
    "sampler": 8,
    "oracle": 9,
    "gradcheck": 10,
}


def tag(label: str) -> int:
    return _TAGS[label]


def derive_seed(seed: int, *parts: int) -> int:
    """Hash (seed, parts...) into a fresh 64-bit seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, *parts: int) -> np.random.Generator:
    """Counter-based generator for the derived stream (seed, parts...)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]])
    return np.random.Generator(np.random.Philox(ss))


def episode_seed(seed: int, class_id: int, index: int) -> int:
    """Per-episode seed: hash of (master seed, class_id, episode index)."""
    return derive_seed(seed, class_id, index)
