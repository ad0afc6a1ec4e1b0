"""Deterministic per-stream seeds derived from a 64-bit master seed."""
from __future__ import annotations

import numpy as np

MAX_SEED = 2**64 - 1


def derive_seed(master: int, *keys: int) -> int:
    """Counter-based split: the same ``(master, keys)`` always gives the same 64-bit seed."""
    if not 0 <= int(master) <= MAX_SEED:
        raise ValueError(f"master seed must be an unsigned 64-bit integer, got {master}")
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(master: int, *keys: int) -> tuple[int, np.random.Generator]:
    seed = derive_seed(master, *keys)
    return seed, np.random.default_rng(seed)
