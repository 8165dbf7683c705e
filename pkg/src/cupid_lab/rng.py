"""Counter-based SplitMix64 stream with Box-Muller normals.

The stream is fully specified so it can be reproduced outside numpy:

    word(k) = mix64(seed + (k + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)
    mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27; z *= 0x94D049BB133111EB
              z ^= z >> 31
    uniform(k) = (word(k) >> 11) * 2**-53                  in [0, 1)

Normals consume two words per pair (u1 from the first, u2 from the second):
``sqrt(-2 log(1 - u1)) * cos(2 pi u2)`` and the matching ``sin`` term.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def mix_seed(seed: int, key: str) -> int:
    """Derive a child seed from ``seed`` and a string key."""
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    z = np.array([(int(seed) ^ int.from_bytes(digest, "little")) & _MASK], dtype=np.uint64)
    return int(_mix64(z + _GAMMA)[0])


class Rng:
    """Deterministic stream of 64-bit words; each draw advances a counter."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def child(self, key: str) -> "Rng":
        return Rng(mix_seed(self.seed, key))

    def words(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + k * _GAMMA)

    def uniform(self, size=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).ravel()[:n]
        return (loc + scale * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Sorting 64-bit words; ties are impossible in practice and broken stably anyway.
        return np.argsort(self.words(n), kind="stable")

    def integers(self, high: int, size=()) -> np.ndarray:
        """Integers in ``[0, high)``."""
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)
