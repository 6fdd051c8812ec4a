"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *key)``, so the numbers a
worker (or Monte Carlo block) sees never depend on which thread ran it or in
what order streams were created.
"""

import numpy as np

# stream tags; part of the key so purposes never share numbers
SAMPLE = 1
PERMUTATION = 2
DATA = 3
INIT = 4
MONTE_CARLO = 5
SDE = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
