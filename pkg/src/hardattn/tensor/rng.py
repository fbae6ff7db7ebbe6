"""Named, seeded random substreams on numpy's counter-based Philox generator."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "dropout", "sampling", "data")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; same key, same stream."""
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
    return np.random.Generator(np.random.Philox(key))


class Streams:
    """Bundle of the standard substreams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        for name in STREAMS:
            setattr(self, name, substream(self.seed, name))

    def child(self, name: str, *extra: int) -> np.random.Generator:
        return substream(self.seed, name, *extra)
