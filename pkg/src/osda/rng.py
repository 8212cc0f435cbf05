"""Seeded random streams.

Every source of randomness in the package is a PCG64 generator derived
from one root seed plus an integer purpose key, so independent concerns
(weight init, batch shuffling, data synthesis, ...) draw from
non-overlapping streams and a single seed reproduces a whole run
bit-for-bit.  PCG64 with SeedSequence is platform-independent and has a
published specification, which is what makes the determinism guarantees
testable.
"""

import numpy as np

# Purpose keys. New purposes get new constants; never renumber.
STREAM_INIT = 0
STREAM_BATCH_SOURCE = 1
STREAM_BATCH_TARGET = 2
STREAM_DATA_SOURCE = 3
STREAM_DATA_TARGET = 4
STREAM_GRADCHECK = 5
STREAM_SWEEP_CELL = 6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the (seed, key) stream; same arguments, same stream."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key))
    )


def derive_seed(seed: int, *key: int) -> int:
    """Fold (seed, key) into a fresh 63-bit seed, e.g. for sweep cells."""
    state = np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0]
    return int(state) & 0x7FFFFFFFFFFFFFFF
