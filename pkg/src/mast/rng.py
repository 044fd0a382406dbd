"""Seeded random streams.

Every random draw in the package goes through a stream derived from a master
seed plus integer keys, so a draw at iteration ``t`` does not depend on how
many draws happened before it.
"""
from __future__ import annotations

import numpy as np

# key namespaces; keep stable, they are part of the reproducibility contract
ITERATION = 0
INIT = 1
METRICS = 2
NODE = 3
SPLIT = 4
ROBUSTNESS = 5
START = 6


def derive_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed on ``(seed, *keys)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def iteration_stream(seed: int, t: int) -> np.random.Generator:
    return derive_stream(seed, ITERATION, t)
