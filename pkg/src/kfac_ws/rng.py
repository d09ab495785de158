"""Named, counter-based random substreams.

Every stochastic path (weight init, data generation, MC label sampling)
draws from its own Philox stream keyed by the run seed and a purpose name,
so adding draws to one path never shifts another.
"""

import zlib

import numpy as np


def purpose_key(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed, purpose):
    """Generator for ``purpose`` under run ``seed``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_key(purpose),))
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    """Lazily created substreams for one run; the same name returns the same generator."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def __call__(self, purpose):
        if purpose not in self._streams:
            self._streams[purpose] = substream(self.seed, purpose)
        return self._streams[purpose]
