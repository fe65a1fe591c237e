"""Named random streams derived from one run seed.

Each stream is seeded from ``(seed, crc32(name))`` so that drawing more
numbers from one stream (say, because an ablation skips sampling) never
shifts another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
