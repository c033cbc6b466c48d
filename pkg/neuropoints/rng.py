"""
Seeded random streams.

Every stochastic step (dropout masks, point subsampling, augmentation, synthetic
shapes, shuffling) draws from an RngState. The generator is numpy's PCG64
(O'Neill's permuted congruential generator, 128-bit state, XSL-RR output),
whose bit stream for a given seed is the same on every platform. Distribution
methods (normal, uniform, permutation) may change between numpy releases, so
bit-identical runs assume the same numpy version.
Child streams are derived with SeedSequence(seed, spawn_key=(index,)), so
per-subject work can run in any order and still produce the same numbers.
"""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass
class RngState:
    seed: int
    spawn_key: Tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(int(k) for k in self.spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, index: int) -> "RngState":
        """Independent child stream keyed by (seed, parent key, index)."""
        return RngState(self.seed, self.spawn_key + (int(index),))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
