"""Seeded counter-based random number context shared by every stochastic component.

A single pipeline seed fans out into independent, reproducible substreams via
``fork``; substream seeds are derived by hashing the parent seed with a label,
so the draw order in one component never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngContext"]

_MASK64 = (1 << 64) - 1


def _derive_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


class RngContext:
    """Counter-based (Philox) RNG owned by whoever is allowed to draw from it."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def fork(self, key: str) -> "RngContext":
        """Derive an independent substream; same (seed, key) always gives the same stream."""
        return RngContext(_derive_seed(self.seed, key))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def normal(self, loc: float, scale: float, shape) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low=low, high=high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def random(self) -> float:
        return float(self._gen.random())
