"""Deterministic embedding backends for image crops and texts.

These are format-true stand-ins for real joint vision-language encoders:
unit-norm, fixed dimension, stable across runs. Swap in a real model
behind the same interface when weights are available.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import ModelLoadError

_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def _splitmix64(seed: int):
    x = seed & _MASK64
    while True:
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _seeded_matrix(seed: int, shape: tuple[int, int]) -> np.ndarray:
    stream = _splitmix64(seed)
    n = shape[0] * shape[1]
    vals = np.array([(next(stream) >> 40) / float(1 << 24) for _ in range(n)])
    return (2.0 * vals - 1.0).reshape(shape)


class PooledProjectionEmbedder:
    """Crop feature: 4x4 mean-pooled RGB plus a color histogram, pushed
    through a frozen seeded projection and L2-normalized."""

    def __init__(self, dim: int = 32, seed: int = 13):
        self.dim = dim
        self.seed = seed
        self._input_dim = 4 * 4 * 3 + 24
        self._projection = _seeded_matrix(seed, (dim, self._input_dim))

    def _pooled(self, crop: np.ndarray) -> np.ndarray:
        h, w = crop.shape[:2]
        out = np.zeros((4, 4, 3))
        for r in range(4):
            for c in range(4):
                block = crop[r * h // 4 : (r + 1) * h // 4 or h, c * w // 4 : (c + 1) * w // 4 or w]
                if block.size == 0:
                    block = crop
                out[r, c] = block.reshape(-1, 3).mean(axis=0)
        return out.reshape(-1) / 255.0

    def _histogram(self, crop: np.ndarray) -> np.ndarray:
        hist = []
        for ch in range(3):
            counts, _ = np.histogram(crop[:, :, ch], bins=8, range=(0, 256))
            hist.append(counts / max(1, crop.shape[0] * crop.shape[1]))
        return np.concatenate(hist)

    def embed_crop(self, crop: np.ndarray) -> np.ndarray:
        if crop.size == 0:
            raise ValueError("empty crop")
        x = np.concatenate([self._pooled(crop), self._histogram(crop)])
        v = self._projection @ x
        norm = np.linalg.norm(v)
        if norm == 0:
            v = self._projection[:, 0].copy()
            norm = np.linalg.norm(v)
        return v / norm


class HashedBagOfWordsTextEmbedder:
    """Text feature: mean of per-token seeded vectors, L2-normalized.

    Deterministic and vocabulary-free; one fixed vector stands in for the
    empty string.
    """

    def __init__(self, dim: int = 32, seed: int = 29):
        self.dim = dim
        self.seed = seed

    def _token_vector(self, token: str) -> np.ndarray:
        stream = _splitmix64((self.seed ^ _fnv1a64(token)) & _MASK64)
        vals = np.array([(next(stream) >> 40) / float(1 << 24) for _ in range(self.dim)])
        return 2.0 * vals - 1.0

    def embed_text(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower()) or ["<empty>"]
        v = np.mean([self._token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(v)
        if norm == 0:
            v = self._token_vector("<zero>")
            norm = np.linalg.norm(v)
        return v / norm

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_text(t) for t in texts])


_EMBEDDERS = {"pooled-projection": PooledProjectionEmbedder}
_UNAVAILABLE = {
    "clip": "CLIP weights are not bundled; plug the model in behind the "
    "embedder interface and register it",
}


def make_embedder(name: str, **kwargs):
    if name in _UNAVAILABLE:
        raise ModelLoadError(f"embedder {name!r}: {_UNAVAILABLE[name]}")
    try:
        return _EMBEDDERS[name](**kwargs)
    except KeyError:
        raise ModelLoadError(f"unknown embedder {name!r} (have {sorted(_EMBEDDERS)})")
