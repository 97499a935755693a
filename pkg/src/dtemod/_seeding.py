"""Seed derivation helpers.

Every stochastic routine takes an explicit integer seed. Child streams are
derived with :class:`numpy.random.SeedSequence` spawn keys so that a stream
depends only on ``(master seed, key...)`` and never on execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("seed keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *keys: int | str) -> np.random.SeedSequence:
    """SeedSequence for ``seed`` specialised by integer or string keys."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def rng_for(seed: int | np.random.SeedSequence, *keys: int | str) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        if keys:
            seed = np.random.SeedSequence(
                entropy=seed.entropy,
                spawn_key=tuple(seed.spawn_key) + tuple(_key_to_int(k) for k in keys),
            )
        return np.random.default_rng(seed)
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``keys``."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
