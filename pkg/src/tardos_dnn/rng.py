"""Seed derivation.

Every random quantity comes from a named substream of a 64-bit master seed:
``substream(seed, *key)`` builds a PCG64 generator from
``SeedSequence(entropy=seed, spawn_key=key)``, where string tags are mapped to
integers with CRC-32. Streams therefore depend only on (seed, key), never on
the order in which they are requested or on the number of workers.
"""

from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def _key_part(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"stream key parts must be non-negative, got {part}")
    return part


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def seed_sequence(seed: int, *key: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=check_seed(seed), spawn_key=tuple(_key_part(k) for k in key))


def substream(seed: int, *key: int | str) -> np.random.Generator:
    """Generator for the purpose identified by ``key`` under master ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))


def derive_seed(seed: int, *key: int | str) -> int:
    """A child 64-bit seed, for components that take a plain integer seed."""
    return int(seed_sequence(seed, *key).generate_state(1, dtype=np.uint64)[0])
