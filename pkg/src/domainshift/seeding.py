"""Deterministic RNG stream derivation.

Every random draw in this package flows through a generator obtained from
``derive_rng``. Streams are keyed by an integer base seed plus a tuple of
context keys (epoch numbers, grid indices, purpose labels), mixed through
``numpy.random.SeedSequence``. Distinct key tuples yield statistically
independent streams, and the same tuple always yields the same stream, on
any platform and regardless of call order elsewhere in the program.

String keys are hashed with CRC-32 so that labels like ``"dann"`` or
``"shuffle"`` can participate in the key tuple without a registry.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed", "key_to_int"]


def key_to_int(key: int | str) -> int:
    """Map a stream key to a non-negative integer."""
    if isinstance(key, bool):
        raise TypeError("bool is not a valid stream key")
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return key
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


def derive_seed(base_seed: int, *keys: int | str) -> np.random.SeedSequence:
    """Build the seed sequence for the stream identified by ``keys``."""
    if base_seed < 0:
        raise ValueError(f"base seed must be non-negative, got {base_seed}")
    entropy = [base_seed] + [key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(base_seed: int, *keys: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream identified by ``keys``."""
    return np.random.default_rng(derive_seed(base_seed, *keys))
