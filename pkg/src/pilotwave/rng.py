"""Counter-based, splittable random numbers.

Output ``i`` of a stream with key ``K`` is ``splitmix64(K + (i + 1) * GOLDEN)``,
so any draw can be computed directly from ``(key, counter)``. Child streams
get keys hashed from the parent key and a tag. Per-particle draws index the
counter by particle, which keeps results independent of evaluation order.
"""
from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash_key(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


class CounterRNG:
    """Stateless-by-counter generator; ``random(n)`` also keeps a cursor."""

    def __init__(self, seed: int, _key: int | None = None):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.key = _hash_key("root", self.seed) if _key is None else _key
        self._cursor = 0

    def split(self, *tags) -> "CounterRNG":
        return CounterRNG(self.seed, _hash_key(self.key, *tags))

    def bits_at(self, counters) -> np.ndarray:
        c = np.asarray(counters, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + (c + np.uint64(1)) * _GOLDEN
        return _splitmix(z)

    def uniform_at(self, counters) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        bits = self.bits_at(counters)
        return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def random(self, n: int) -> np.ndarray:
        out = self.uniform_at(np.arange(self._cursor, self._cursor + n, dtype=np.uint64))
        self._cursor += n
        return out

    def per_item(self, n_items: int, n_draws: int) -> np.ndarray:
        """Array ``(n_items, n_draws)``; row i depends only on (key, i)."""
        idx = np.arange(n_items, dtype=np.uint64)[:, None] * np.uint64(n_draws)
        return self.uniform_at(idx + np.arange(n_draws, dtype=np.uint64)[None, :])


def as_rng(seed_or_rng) -> CounterRNG:
    if isinstance(seed_or_rng, CounterRNG):
        return seed_or_rng
    return CounterRNG(int(seed_or_rng))
