"""Seeded random source.

Wraps numpy's PCG64 bit generator.  Streams are a pure function of
(seed, key): the same pair yields the same draws on every platform and
thread count.  spawn(i) derives an independent child stream through
numpy's SeedSequence spawning, which is itself deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from stunmoe.errors import ArgumentError

ALGORITHM = "pcg64"


@dataclass
class SeededRng:
    seed: int
    key: tuple = ()
    algorithm: str = ALGORITHM
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.algorithm != ALGORITHM:
            raise ArgumentError(f"unsupported rng algorithm {self.algorithm!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ArgumentError("seed must be a non-negative integer")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, index):
        """Deterministic child stream; spawn(i) is independent of prior draws."""
        return SeededRng(self.seed, self.key + (int(index),))

    def normal(self, shape, loc=0.0, scale=1.0):
        return self._gen.normal(loc=loc, scale=scale, size=shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low=low, high=high, size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def state_token(self):
        """Short stable fingerprint of (seed, key) for reports."""
        return f"{ALGORITHM}:{self.seed}:{','.join(str(k) for k in self.key)}"
