"""Counter-based random streams.

Every stream is a Philox generator whose key is derived from the
experiment seed and an integer key tuple, so a stream depends only on
*what* it simulates, never on the order in which work is scheduled.

Monte Carlo batches are cut into fixed-size blocks of paths; block ``j``
of a run with seed ``s`` and tag ``g`` always draws from
``stream(s, g, j)``.  Results for a given ``(seed, n_paths)`` are
therefore bit-identical no matter how blocks are distributed.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

BLOCK_SIZE = 2048

# stream tags, one per independent source of randomness
TAG_FELLER = 1
TAG_STABLE = 2
TAG_FLOW = 3
TAG_COALESCENT = 4
TAG_GFVI = 5
TAG_HITTING = 6
TAG_OUTER = 7
TAG_GENLAB = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator keyed by ``(seed, *key)``."""
    if seed is None:
        raise ValueError("seed is mandatory")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n_paths: int, block_size: int = BLOCK_SIZE) -> Iterator[tuple[int, slice]]:
    """Yield ``(block_index, slice)`` covering ``range(n_paths)``."""
    for j, start in enumerate(range(0, n_paths, block_size)):
        yield j, slice(start, min(start + block_size, n_paths))
