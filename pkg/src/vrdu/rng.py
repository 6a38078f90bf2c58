"""Counter-based named random streams.

Every stochastic choice in the pipeline draws from an ``RngStream`` keyed by
(seed, stream name). Draws are generated with the Philox counter-based bit
generator, so a given (seed, name, counter) triple yields the same values on
any platform and regardless of how many other streams were consumed in
between. Separate names give statistically independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A deterministic, independently-seeded random stream."""

    def __init__(self, seed: int, name: str, counter: int = 0):
        self.seed = seed & _MASK64
        self.name = name
        self.counter = counter

    def _next_gen(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=[self.seed, _name_key(self.name)],
            counter=[self.counter, 0, 0, 0],
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def child(self, suffix: str) -> "RngStream":
        """Derive an independent stream, e.g. per-example from a task stream."""
        return RngStream(self.seed, f"{self.name}/{suffix}")

    def random(self, size=None) -> np.ndarray:
        return self._next_gen().random(size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self._next_gen().normal(0.0, std, size)

    def integers(self, low: int, high: int, size=None):
        return self._next_gen().integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_gen().permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} from {n} without replacement")
        return self._next_gen().choice(n, size=k, replace=False)
