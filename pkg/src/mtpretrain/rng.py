"""Per-purpose seeded random streams.

Every random draw in the package comes from numpy's Philox-4x64 counter-based
bit generator, keyed through ``SeedSequence(entropy=seed, spawn_key=(purpose,
*index))``.  A stream therefore depends only on the run seed, its purpose and
an integer index path (image index, epoch, ...), never on call order or on how
work is split across workers.
"""

import numpy as np

PURPOSES = {
    "data": 0,
    "augment": 1,
    "mask": 2,
    "init": 3,
    "shuffle": 4,
    "probe": 5,
    "gradcheck": 6,
}


def stream(seed, purpose, *index):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, purpose, *index)``."""
    key = (PURPOSES[purpose],) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
