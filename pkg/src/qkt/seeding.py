"""Hierarchical seed streams so one stage's draws never shift another's."""
from __future__ import annotations

import numpy as np

DATA, PARTITION, INIT, PRETRAIN, QUERY, TRANSFER, BASELINE = range(7)


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    return np.random.SeedSequence(seed)


def stream(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent child sequence for ``(seed, *keys)``."""
    return np.random.SeedSequence(seed, spawn_key=tuple(keys))


def stream_int(seed: int, *keys: int) -> int:
    """A 32-bit integer seed drawn from ``stream(seed, *keys)``."""
    return int(stream(seed, *keys).generate_state(1)[0])
