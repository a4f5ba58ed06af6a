"""Content-keyed seed derivation so randomness never depends on call order."""
from __future__ import annotations

import hashlib

import numpy as np


def _as_key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError(f"seed keys must be non-negative, got {k}")
        return int(k)
    digest = hashlib.sha256(str(k).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys) -> int:
    """Mix any number of ints/strings into one 32-bit seed."""
    return int(np.random.SeedSequence([_as_key(k) for k in keys]).generate_state(1)[0])
