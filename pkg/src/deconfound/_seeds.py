"""Deterministic seed derivation.

All randomness in a pipeline run flows from one master seed. Each stage
(and each simulation replicate inside a stage) gets its own child seed,
derived from the master seed plus a stable label, so re-running any single
stage reproduces it exactly without replaying the stages before it.

The derivation hashes the label with CRC-32 and feeds it to numpy's
SeedSequence as a spawn key; both are stable across platforms and numpy
versions.
"""

import zlib

import numpy as np


def derive_seed(master_seed, label, index=None):
    """Return a child seed for a named stage.

    Parameters
    ----------
    master_seed : int
        The run's master seed.
    label : str
        Stage name, e.g. "fit" or "benchmark".
    index : int, optional
        Replicate number within the stage, for per-simulation streams.

    Returns
    -------
    int
        A 64-bit seed suitable for numpy.random.default_rng.
    """
    key = (zlib.crc32(label.encode("utf-8")),)
    if index is not None:
        key = key + (int(index),)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint64)[0])
