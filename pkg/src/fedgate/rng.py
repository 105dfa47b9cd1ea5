"""Deterministic random streams built on SplitMix64.

Every stochastic choice in the package (weight init, minibatch shuffles,
Dirichlet partition draws, synthetic data) flows through this module so that
results reproduce bit-for-bit from integer seeds alone, independent of
platform and numpy version. Sampling uses classic routines: Marsaglia's
polar method for normals and the Marsaglia-Tsang squeeze for gammas.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, *tags: int | str) -> int:
    """Derive an independent child seed from a parent seed and a tag path.

    Tags may be ints or strings; the fold is order-sensitive, so
    derive(s, a, b) and derive(s, b, a) give unrelated streams.
    """
    state = _mix64(seed & _MASK64)
    for tag in tags:
        t = _fnv1a64(tag) if isinstance(tag, str) else (tag & _MASK64)
        state = _mix64((state + _GOLDEN) ^ _mix64(t))
    return state


class SplitMix64:
    """SplitMix64 counter-based generator with double-precision helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix64(self._state)

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) via rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def normal(self) -> float:
        """Standard normal via Marsaglia's polar method (spare cached)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        while True:
            u = 2.0 * self.random() - 1.0
            v = 2.0 * self.random() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                break
        f = np.sqrt(-2.0 * np.log(s) / s)
        self._spare_normal = v * f
        return u * f

    def normals(self, shape) -> np.ndarray:
        flat = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(flat.size):
            flat[i] = self.normal()
        return flat.reshape(shape)

    def uniforms(self, shape) -> np.ndarray:
        flat = np.empty(int(np.prod(shape)), dtype=np.float64)
        for i in range(flat.size):
            flat[i] = self.random()
        return flat.reshape(shape)

    def gamma(self, shape_param: float) -> float:
        """Gamma(shape, 1) via Marsaglia-Tsang; shapes below 1 use the
        standard boost g(a) = g(a+1) * u^(1/a)."""
        a = float(shape_param)
        if a <= 0.0:
            raise ValueError("gamma shape must be positive")
        if a < 1.0:
            return self.gamma(a + 1.0) * self.random() ** (1.0 / a)
        d = a - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if u > 0.0 and np.log(u) < 0.5 * x * x + d * (1.0 - v + np.log(v)):
                return d * v

    def dirichlet(self, alpha: float, k: int) -> np.ndarray:
        """Symmetric Dirichlet draw of length k with concentration alpha."""
        draws = np.array([self.gamma(alpha) for _ in range(k)])
        total = draws.sum()
        if total <= 0.0:
            return np.full(k, 1.0 / k)
        return draws / total

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def stream(seed: int, *tags: int | str) -> SplitMix64:
    """Generator seeded by a derived child seed; see derive_seed."""
    return SplitMix64(derive_seed(seed, *tags))
