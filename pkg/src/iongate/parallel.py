"""Deterministic worker-pool helpers.

Every parallel map in the package routes through :func:`ordered_map` so that
results are reduced in submission order and the output is identical for any
worker count.  Randomness must be passed in per item (seeds derived ahead of
the map), never drawn inside workers from shared state.
"""

from __future__ import annotations

import multiprocessing as mp

import numpy as np


def ordered_map(fn, items, threads: int = 1, chunksize: int | None = None):
    """Map ``fn`` over ``items``, preserving order; pool only when threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (threads * 8))
    with mp.get_context("fork").Pool(processes=threads) as pool:
        return pool.map(fn, items, chunksize=chunksize)


def spawn_seeds(root_seed: int, n: int) -> list[int]:
    """n independent child seeds, stable for a given root seed."""
    ss = np.random.SeedSequence(root_seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
