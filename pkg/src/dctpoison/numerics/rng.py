"""SplitMix64 pseudo-random stream.

Every random decision in the toolkit (weight init, crops, shuffles, subset
selection, alpha sampling, synthetic textures) is drawn from this generator so
that poisoned datasets can be regenerated bit-for-bit from a seed.
"""
from __future__ import annotations

import math
from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB
_TWO_NEG_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """SplitMix64 output finalizer applied to a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, matching the scalar path.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


class Rng64:
    """Seedable SplitMix64 generator.

    The state advances by the golden-ratio increment on every draw, so the
    ``i``-th output is a pure function of ``seed + (i + 1) * GAMMA``. The
    vectorised helpers exploit that to produce long blocks without a Python
    loop while staying bit-identical to repeated :meth:`next_u64` calls.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self) -> str:
        return f"Rng64(state=0x{self.state:016X})"

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError(f"n must be nonnegative, got {n}")
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            states = steps + np.uint64(self.state)
            out = _mix64_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * _TWO_NEG_53

    def random_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) * _TWO_NEG_53).reshape(shape)

    def uniform(self, lo: float, hi: float) -> float:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        return lo + (hi - lo) * self.random()

    def uniform_array(self, lo: float, hi: float, shape) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        return lo + (hi - lo) * self.random_array(shape)

    def normal_array(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller, two uniforms per output."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random_array((2, n))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        return (radius * np.cos(2.0 * math.pi * u[1])).reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n) by scaling one uniform draw."""
        if n <= 0:
            raise ValueError(f"randint requires n > 0, got {n}")
        return min(int(self.random() * n), n - 1)

    def choice_weighted(self, items: Sequence[T], weights: Sequence[float]) -> T:
        if len(items) != len(weights) or not items:
            raise ValueError("items and weights must be nonempty and of equal length")
        if any(w < 0 for w in weights):
            raise ValueError(f"weights must be nonnegative, got {list(weights)}")
        total = math.fsum(weights)
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        target = self.random() * total
        acc = 0.0
        for item, w in zip(items, weights):
            acc += w
            if target < acc:
                return item
        # float round-off can leave target == acc on the last positive weight
        for item, w in zip(reversed(items), reversed(weights)):
            if w > 0:
                return item
        raise AssertionError("unreachable")

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} items from {n}")
        return np.sort(self.permutation(n)[:k])

    def derive(self, *keys: int) -> "Rng64":
        """Independent child stream keyed by integers, leaving ``self`` untouched."""
        s = self.state
        for key in keys:
            s = mix64(s ^ mix64((int(key) * GAMMA + GAMMA) & MASK64))
        return Rng64(s)
