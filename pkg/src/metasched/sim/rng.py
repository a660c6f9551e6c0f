"""Portable seeded PRNG so traces reproduce across implementations.

Generator: xorshift64* (Vigna 2014) with shifts (12, 25, 27) and output
multiplier 0x2545F4914F6CDD1D. The 64-bit seed is expanded with one round
of splitmix64; a zero result is replaced by the golden-ratio constant.

Derived draws:

* ``random()``: top 53 bits of the output scaled by 2**-53, in [0, 1).
* ``exponential(rate)``: inverse CDF, ``-log(1 - u) / rate``.
* ``log_uniform(lo, hi)``: ``exp(log(lo) + u * (log(hi) - log(lo)))``.
* ``weighted_choice``: first index whose cumulative weight exceeds ``u * sum``.
* ``below(n)``: ``floor(u * n)``.
"""

from __future__ import annotations

import math
from typing import Sequence

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Xorshift64Star:
    def __init__(self, seed: int):
        if seed < 0 or seed > MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.state = splitmix64(seed) or GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def exponential(self, rate: float) -> float:
        return -math.log1p(-self.random()) / rate

    def log_uniform(self, lo: float, hi: float) -> float:
        a, b = math.log(lo), math.log(hi)
        return math.exp(a + (b - a) * self.random())

    def below(self, n: int) -> int:
        return min(int(self.random() * n), n - 1)

    def weighted_choice(self, values: Sequence, weights: Sequence[float]):
        target = self.random() * sum(weights)
        acc = 0.0
        for v, w in zip(values, weights):
            acc += w
            if target < acc:
                return v
        return values[-1]
