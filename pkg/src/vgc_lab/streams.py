"""Counter-based random substreams.

Every stream is a Philox generator keyed by the master seed. The three high
words of the 256-bit Philox counter carry the stream path (e.g. replication,
purpose, coordinate); the low word is the generator's own block counter, with
the path depth in its top byte. Two distinct paths therefore never overlap,
and the numbers a stream produces do not depend on which other streams were
consumed first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_MAX_DEPTH = 3

# purpose tags (second path component inside a replication)
DATA = 0
VGC_MC = 1
RANDOMIZED = 2
INSTANCE = 3


@dataclass(frozen=True)
class StreamKey:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if len(self.path) > _MAX_DEPTH:
            raise ValueError(f"stream paths are limited to {_MAX_DEPTH} components")
        if any(not 0 <= p <= _MASK64 for p in self.path):
            raise ValueError("stream path components must be unsigned 64-bit integers")

    def child(self, *components: int) -> StreamKey:
        return StreamKey(self.seed, self.path + tuple(int(c) for c in components))

    def generator(self) -> np.random.Generator:
        counter = np.zeros(4, dtype=np.uint64)
        counter[0] = len(self.path) << 56  # depth tag keeps (1,) and (1, 0) apart
        counter[1 : 1 + len(self.path)] = self.path
        return np.random.Generator(np.random.Philox(key=self.seed, counter=counter))


def as_key(seed: int | StreamKey) -> StreamKey:
    if isinstance(seed, StreamKey):
        return seed
    return StreamKey(int(seed))


def substream(seed: int | StreamKey, *path: int) -> np.random.Generator:
    """Generator for ``path`` below ``seed``."""
    return as_key(seed).child(*path).generator()
