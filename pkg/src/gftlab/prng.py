"""Counter-based SplitMix64 generator.

The stream for seed ``s`` is ``mix(s + k * GOLDEN)`` for ``k = 1, 2, ...``
where ``mix`` is the SplitMix64 finalizer.  Uniform doubles use the top 53
bits.  Gaussians use Box-Muller on consecutive pairs ``(a, b)``:
``r = sqrt(-2 ln u_a)`` with ``u_a`` in (0, 1], giving ``r cos(2 pi u_b)``
followed by ``r sin(2 pi u_b)``.

Sub-streams come from :meth:`Prng.fork`, which hashes the root seed together
with a key tuple such as ``("batch", step)`` through BLAKE2b.  Forks depend
only on the root seed and the key, never on how much of the parent stream
was consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0**-53


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key_hash(seed: int, keys: tuple) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little"))
    for k in keys:
        h.update(b"\x1f")
        h.update(repr(k).encode())
    return int.from_bytes(h.digest(), "little")


class Prng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def fork(self, *keys) -> "Prng":
        return Prng(_key_hash(self.seed, keys))

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self.state) + k * GOLDEN
        self.state = (self.state + n * int(GOLDEN)) & _MASK64
        return mix64(counters)

    def uniform(self, size) -> np.ndarray:
        shape = _shape(size)
        n = int(np.prod(shape))
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = _shape(size)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        raw = (self.u64(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (raw[0::2] + 1.0) * _TWO_M53
        u2 = raw[1::2] * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n].reshape(shape)

    def integers(self, high: int, size) -> np.ndarray:
        """Integers in [0, high) by scaling a uniform draw."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self.uniform(size) < p

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One draw per row of ``probs`` (rows sum to 1) by inverse CDF."""
        probs = np.atleast_2d(probs)
        cdf = np.cumsum(probs, axis=-1)
        u = self.uniform(probs.shape[0])[:, None] * cdf[:, -1:]
        idx = (u >= cdf).sum(axis=-1)
        return np.minimum(idx, probs.shape[-1] - 1)


def _shape(size) -> tuple:
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)
