from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .relation import mix64

_SEED_A = 0x5EED
_SEED_B = 0xB100


def bloom_parameters(n: int, epsilon: float) -> tuple[int, int]:
    """Bits and hash count for ``n`` keys at false-positive rate ``epsilon``."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    n = max(int(n), 1)
    m = max(8, math.ceil(-n * math.log(epsilon) / math.log(2) ** 2))
    k = max(1, round(m / n * math.log(2)))
    return m, k


@dataclass
class BloomFilter:
    bits: np.ndarray  # bool, length m
    k: int
    epsilon: float

    @property
    def m(self) -> int:
        return len(self.bits)

    @classmethod
    def empty(cls, n: int, epsilon: float) -> "BloomFilter":
        m, k = bloom_parameters(n, epsilon)
        return cls(np.zeros(m, dtype=bool), k, epsilon)

    def _positions(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64)
        m = np.uint64(self.m)
        h1 = mix64(keys, _SEED_A)
        h2 = mix64(keys, _SEED_B) | np.uint64(1)
        i = np.arange(self.k, dtype=np.uint64)[:, None]
        return ((h1[None, :] + i * h2[None, :]) % m).astype(np.int64)

    def add(self, keys) -> None:
        self.bits[self._positions(keys).ravel()] = True

    def contains(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64)
        if keys.size == 0:
            return np.zeros(0, dtype=bool)
        return self.bits[self._positions(keys)].all(axis=0)

    def union(self, other: "BloomFilter") -> "BloomFilter":
        if self.m != other.m or self.k != other.k:
            raise ValueError("filters differ in shape")
        return BloomFilter(self.bits | other.bits, self.k, self.epsilon)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits, bitorder="little").tobytes()

    def with_bits(self, data: bytes) -> "BloomFilter":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: self.m]
        return BloomFilter(bits.astype(bool), self.k, self.epsilon)


def bloom_build(keys, epsilon: float, expected: int | None = None) -> BloomFilter:
    keys = np.asarray(keys, dtype=np.uint64)
    bf = BloomFilter.empty(expected if expected is not None else len(keys), epsilon)
    if keys.size:
        bf.add(keys)
    return bf


def bloom_contains(bf: BloomFilter, key) -> bool | np.ndarray:
    if np.ndim(key) == 0:
        return bool(bf.contains(np.array([key], dtype=np.uint64))[0])
    return bf.contains(key)
