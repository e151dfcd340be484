"""Deterministic random-stream management.

All randomness in the package flows from a single 64-bit seed through named
child streams, so that every artifact is reproducible and independent
sub-computations (per-partition noise, per-record training data, per-iteration
reverse-chain noise) can be generated in any order without changing results.

The mapping is: ``stream(seed, k1, k2, ...)`` returns the generator built from
``numpy.random.SeedSequence(seed, spawn_key=(k1, k2, ...))``.  Integer keys are
stable package-wide conventions, e.g. partition ``i`` of a measurement pass
uses ``stream(seed, PARTITION_NOISE, i)``.
"""

import numpy as np

# Stream namespaces.  Values are arbitrary but frozen: changing them changes
# every seeded artifact.
DATA = 1
PARTITIONS = 2
PROJECTIONS = 3
PARTITION_NOISE = 4
FORWARD_NOISE = 5
REVERSE_NOISE = 6
INIT_PARAMS = 7
TRAIN_BATCH = 8
ITERATE = 9
CLEAN_PROJECTION = 10
CALIBRATION = 11
TRAINING_SET = 12
EVAL = 13


def stream(seed, *key):
    """Return a ``numpy.random.Generator`` for the child stream ``key``.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    *key : int
        Path of integer keys identifying the child stream.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
