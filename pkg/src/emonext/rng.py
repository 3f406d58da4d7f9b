"""Counter-based, splittable random streams.

A stream is addressed by ``(seed, *path)``; the same address always yields
the same Philox generator, independent of call order or thread scheduling.
"""
from __future__ import annotations

import numpy as np

# stream namespaces
INIT = 0
DROP_PATH = 1
AUGMENT = 2
SHUFFLE = 3


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
