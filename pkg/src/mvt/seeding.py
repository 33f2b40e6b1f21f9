"""Deterministic RNG substreams keyed by (seed, purpose, ...).

Keying every consumer by its own tuple makes training runs reproducible
regardless of evaluation order and lets independent samples be drawn
concurrently without shared stream state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(*key) -> np.random.Generator:
    """Generator derived from a mixed int/str key, stable across runs."""
    entropy = []
    for part in key:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(int(part))
    return np.random.default_rng(entropy)
