"""
Named random sub-streams derived from the single run seed.

Every component draws from its own numpy Generator so that changing, say, the
evaluation sample size never shifts the training supply paths.
"""

import numpy as np

STREAMS = {"population": 0, "supply": 1, "init": 2, "eval": 3}


def rng_stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for stream `name`; extra indices (epoch, sample j, ...) select a sub-stream."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}; expected one of {sorted(STREAMS)}")
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    entropy = [int(seed), STREAMS[name], *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
