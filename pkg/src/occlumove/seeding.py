"""Deterministic seed derivation: one root seed fans out per stage/label."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit sub-seed from a root seed and a label path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(root).to_bytes(16, "little", signed=True))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
