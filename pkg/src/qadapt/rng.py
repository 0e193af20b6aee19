"""Deterministic cross-platform random streams for frozen model weights.

All weight material derives from splitmix64, which has published test
vectors and an exact integer reference implementation, so identical seeds
give bit-identical weights on every platform.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea & Flood reference implementation)
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(seed: int) -> Iterator[int]:
    """Yield the splitmix64 u64 stream for ``seed``."""
    x = seed & _MASK64
    while True:
        x = (x + _GAMMA) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        yield z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of ``text`` (UTF-8), used to derive sub-seeds."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-tensor sub-seed from a base seed and a tag string."""
    return (seed ^ fnv1a64(tag)) & _MASK64


def seeded_uniform(seed: int, count: int) -> np.ndarray:
    """First ``count`` uniforms in [0, 1) from the splitmix64 stream.

    Each u64 x maps to float32 via (x >> 40) / 2**24, i.e. the top 24 bits,
    which every float32 represents exactly.
    """
    stream = splitmix64(seed)
    raw = [next(stream) >> 40 for _ in range(count)]
    return (np.array(raw, dtype=np.float64) / float(1 << 24)).astype(np.float32)


def seeded_weights(seed: int, shape: tuple[int, ...], bound: float) -> np.ndarray:
    """Seeded float64 tensor with entries uniform in [-bound, +bound]."""
    n = int(np.prod(shape)) if shape else 1
    u = seeded_uniform(seed, n).astype(np.float64)
    return ((2.0 * u - 1.0) * bound).reshape(shape)
