"""Deterministic seed derivation.

Every random stream in the engine is derived from one root seed plus a
string label, so that runs are reproducible and modules cannot collide
by accident.
"""

from __future__ import annotations

import hashlib

import numpy as np


def split_seed(root_seed: int, label: str) -> int:
    """Derive a 63-bit child seed from ``root_seed`` and a fixed label."""
    digest = hashlib.sha256(f"{root_seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(root_seed: int, label: str) -> np.random.Generator:
    """A PCG64 generator seeded from ``split_seed(root_seed, label)``."""
    return np.random.default_rng(split_seed(root_seed, label))
