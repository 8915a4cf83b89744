"""SplitMix64 generator with label-based seed derivation.

All randomness in the package flows from this generator so that runs are
bit-identical across platforms. ``derive_seed(root, *labels)`` hashes the
labels with BLAKE2b and mixes the digest into the root seed; child streams for
scenes, oracles, training and so on are derived this way, so a partial rerun
sees the same draws as a full one.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(root: int, *labels) -> int:
    h = hashlib.blake2b(digest_size=8)
    for lab in labels:
        h.update(repr(lab).encode())
        h.update(b"\x1f")
    return mix64((int(root) & MASK) ^ int.from_bytes(h.digest(), "little"))


def hash_rows(seed: int, rows: np.ndarray) -> np.ndarray:
    """One 64-bit hash per row of a float64 array, keyed by ``seed``."""
    rows = np.ascontiguousarray(np.asarray(rows, dtype=np.float64))
    if rows.ndim == 1:
        rows = rows[:, None]
    bits = rows.view(np.uint64)
    with np.errstate(over="ignore"):
        z = np.full(rows.shape[0], np.uint64(mix64(seed)), dtype=np.uint64)
        for k in range(bits.shape[1]):
            z = _mix64_array(z ^ bits[:, k] + np.uint64(GAMMA))
    return z


def u64_to_unit(z: np.ndarray) -> np.ndarray:
    return (z >> np.uint64(11)).astype(np.float64) * _INV53


def u64_to_normal(z: np.ndarray) -> np.ndarray:
    """Standard normals from two decorrelated uniforms per hash (Box-Muller)."""
    with np.errstate(over="ignore"):
        z2 = _mix64_array(z + np.uint64(GAMMA))
    u1 = 1.0 - u64_to_unit(z)
    u2 = u64_to_unit(z2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & MASK
        self.state = self.seed

    def spawn(self, *labels) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, *labels))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def _block(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            z = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & MASK
        return _mix64_array(z)

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV53

    def random_array(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0)
        return u64_to_unit(self._block(n))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mean + sd * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0)
        u1 = 1.0 - self.random_array(n)
        u2 = self.random_array(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi)``."""
        if hi <= lo:
            raise ValueError("empty integer range")
        return lo + int(self.random() * (hi - lo))

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` in sorted order (partial Fisher-Yates)."""
        k = min(k, n)
        pool = np.arange(n)
        for i in range(k):
            j = self.integers(i, n)
            pool[i], pool[j] = pool[j], pool[i]
        return np.sort(pool[:k])
