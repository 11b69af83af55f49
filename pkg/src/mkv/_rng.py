"""Counter-based random streams.

Every Monte-Carlo trial owns an independent Philox stream addressed by a
spawn key, so results never depend on scheduling, batching, or worker
count. Within a trial the draw order is fixed: initial particle positions
first, then the Brownian increments in time order. Block draws of the
increments are bit-identical to per-step draws because numpy generators
consume the bit stream sequentially.

Key layout used by the experiment code:

    (cell_index, trial_index, role)

with role 0 for simulation noise and role 1 for estimator initialisation,
so adding an estimator never perturbs the simulated data.
"""

from __future__ import annotations

import numpy as np

SIM_ROLE = 0
EST_ROLE = 1


def substream(entropy: int | np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Generator for the Philox stream at ``key`` under a master seed.

    A SeedSequence master is extended by appending ``key`` to its spawn key,
    so substreams of an addressed stream stay collision-free.
    """
    key = tuple(int(k) for k in key)
    if isinstance(entropy, np.random.SeedSequence):
        seq = np.random.SeedSequence(
            entropy=entropy.entropy, spawn_key=tuple(entropy.spawn_key) + key
        )
    else:
        seq = np.random.SeedSequence(entropy=entropy, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def generator_from(seed_seq: np.random.SeedSequence | int) -> np.random.Generator:
    """Wrap a seed or SeedSequence into a Philox generator."""
    if not isinstance(seed_seq, np.random.SeedSequence):
        seed_seq = np.random.SeedSequence(entropy=int(seed_seq))
    return np.random.Generator(np.random.Philox(seed_seq))


def trial_generators(entropy: int, cell: int, trials: range, role: int = SIM_ROLE):
    """One generator per trial index, keyed (cell, trial, role)."""
    return [substream(entropy, cell, t, role) for t in trials]
