"""SplitMix64: a tiny 64-bit generator that is bit-exact on every platform.

The state advances by the golden-ratio increment and each output is the state
passed through two xor-shift-multiply rounds and a final xor-shift.  Blocks of
outputs are produced with wrapping ``uint64`` numpy arithmetic.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def next_int(self) -> int:
        return int(self.next_u64(1)[0])

    def uniform(self, n: int = None, low: float = 0.0, high: float = 1.0):
        """Doubles in ``[low, high)`` built from the top 53 bits."""
        count = 1 if n is None else n
        u = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller, consuming two uniforms per value."""
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[n:])

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("randbelow needs n >= 1")
        return min(n - 1, int(self.uniform() * n))
