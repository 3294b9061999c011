"""splitmix64 stream, vectorised over numpy uint64.

Draw k of a stream seeded with ``seed`` is mix(seed + (k + 1) * GOLDEN), so a
block of draws can be produced in one shot and is identical to stepping the
generator one value at a time.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        return int(self.next_u64_array(1)[0])

    def next_u64_array(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + count * GOLDEN) & _MASK
        return out

    def uniform(self, shape) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each draw."""
        count = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64_array(count) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)
