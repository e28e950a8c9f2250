"""Seed fan-out.

One experiment seed is split into independent streams by hashing it together
with a purpose path, e.g. ``derive_seed(seed, "openloop", "FedAvg", "intra", 3)``.
Adding a new purpose never changes the streams of existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *purpose) -> int:
    key = f"{int(seed) & MASK64}|" + "/".join(str(p) for p in purpose)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *purpose) -> np.random.Generator:
    if not purpose:
        return np.random.default_rng(int(seed) & MASK64)
    return np.random.default_rng(derive_seed(seed, *purpose))
