"""Seeded random-number substreams.

All randomness in the package flows from a single root seed. Independent
components (data generation, parameter init, stream order, corruption draws)
pull from named substreams so changing one does not perturb the others.
"""
import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by `names` under `seed`.

    Names may mix strings and ints; string parts are hashed with crc32 so the
    derivation is stable across processes and runs.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            keys.append(zlib.crc32(name.encode("utf-8")))
        else:
            keys.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(keys))
