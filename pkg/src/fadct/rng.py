"""Deterministic random streams built on the splitmix64 generator.

Every stochastic step in the package (parameter init, shuffling, posterior
noise, augmentation) draws from an explicitly seeded `Rng`, so runs are
bit-reproducible across platforms and library versions. splitmix64 is the
output mixer of Steele et al.'s SplitMix: state advances by a fixed odd
constant and each output is a finalizer hash of the state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = (h ^ byte) * 0x100000001B3 & _MASK64
    return h


class Rng:
    """splitmix64 stream with scalar and vectorized draws.

    Scalar and array draws consume the same underlying u64 sequence, so a
    given call sequence is reproducible regardless of how it is batched
    into array requests.
    """

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._state = seed & _MASK64

    def derive(self, tag: str) -> "Rng":
        """Child stream keyed by the original seed and a purpose tag.

        Derivation ignores the current position of this stream, so the set
        of child streams does not depend on draw order.
        """
        return Rng(_mix64(self._seed ^ _fnv1a64(tag)))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            out = _mix64_array(idx + np.uint64(self._state))
        self._state = (self._state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * _INV_2_53
        return low + (high - low) * u

    def uniforms(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return low + (high - low) * u

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on (0, 1] uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        raw = (self._raw(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u = (raw + 1.0) * _INV_2_53  # (0, 1], keeps log finite
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def randint(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction (bias negligible for n << 2^64)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
