"""Counter-based random substreams keyed by (seed, replica, purpose, sweep slot).

Every replica owns independent streams for its initial state, its batch
draws and its Gaussian increments. Adding replicas or sweep points never
changes the numbers an existing replica sees.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {"init": 0, "batch": 1, "noise": 2, "misc": 3}


def substream(seed: int, replica: int, purpose: str, slot: int = 0) -> np.random.Generator:
    """Philox generator for one (replica, purpose, slot) key under ``seed``.

    ``slot`` separates points of a parameter sweep; passing the same slot for
    every point gives common random numbers across the sweep.
    """
    if seed < 0 or replica < 0 or slot < 0:
        raise ValueError("seed, replica and slot must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica), PURPOSES[purpose], int(slot)))
    return np.random.Generator(np.random.Philox(ss))
