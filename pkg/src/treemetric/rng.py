"""Deterministic random streams.

Every stochastic component draws from a Philox counter-based generator keyed
by the user seed plus an explicit stream path, so independent components of a
pipeline get independent streams and any run is reproducible bit for bit from
(seed, stream path) alone.
"""

import numpy as np

# Fixed stream ids for pipeline components; appending to this list is safe,
# reordering is not (it would silently change every downstream draw).
TOPOLOGY = 1
EDGE_LENGTHS = 2
SIGNALS = 3
NOISE = 4
ALT_TREES = 5
REPLICATE_TRAIN = 6
REPLICATE_TEST = 7
NOISE_TEST = 8
ALT_SIGNALS_TRAIN = 9
ALT_SIGNALS_TEST = 10
PERMUTE = 11
TRAIN_STEP = 12
MODEL_INIT = 13
SAMPLING = 14


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return a Philox generator for the given seed and stream path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
