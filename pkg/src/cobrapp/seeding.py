"""Seed splitting.

A single integer seed is expanded into independent generator streams by
keying :class:`numpy.random.SeedSequence` with the seed followed by a tuple of
stream identifiers. String identifiers are mapped to integers with CRC32 so
the mapping is stable across interpreter runs (``hash()`` is salted).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream ids must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def split(seed: int, *stream) -> np.random.SeedSequence:
    """Return the seed sequence for ``(seed, *stream)``."""
    return np.random.SeedSequence([_key(seed), *(_key(s) for s in stream)])


def substream(seed: int, *stream) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *stream)``."""
    return np.random.default_rng(split(seed, *stream))


def derive_seed(seed: int, *stream) -> int:
    """A 32-bit integer seed for ``(seed, *stream)``, for APIs that take plain ints."""
    return int(split(seed, *stream).generate_state(1)[0])
