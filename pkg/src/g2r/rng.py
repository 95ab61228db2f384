"""Named, independent random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return a generator for ``(seed, name, *index)``.

    Streams with different names or indices are statistically independent,
    and each is reproducible from the root seed alone.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    key.extend(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
