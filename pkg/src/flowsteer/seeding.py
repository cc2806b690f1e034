"""Every random draw comes from ``rng(seed, stream, *extra)``.

The tuple is fed to ``numpy.random.SeedSequence`` so streams never overlap:

    stream 0  network initialisation
    stream 1  training minibatches (indices, noise, times)
    stream 4  sampler start noise, one sub-stream per eval sample index
    stream 5  random instances for the proposition checks
"""
from __future__ import annotations

import numpy as np

INIT = 0
BATCHES = 1
NOISE = 4
VERIFY = 5


def rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *map(int, extra)])


def start_noise(seed: int, index: int, dim: int) -> np.ndarray:
    return rng(seed, NOISE, index).standard_normal(dim)
