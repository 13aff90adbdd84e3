"""Deterministic random streams.

Every Monte Carlo routine splits its paths into fixed-size blocks. Block ``b``
of a run seeded with ``seed`` draws from the stream keyed by
``(seed, purpose, b)``, so results depend only on the seed and the block
layout, never on how blocks are scheduled across workers.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

BLOCK_SIZE = 4096

T = TypeVar("T")


def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, int):
        return purpose
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str | int, *index: int) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, *index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_purpose_key(purpose), *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


def blocks(n: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int, int]]:
    """Split ``n`` paths into ``(block_index, start, stop)`` triples."""
    return [(b, start, min(start + block_size, n)) for b, start in enumerate(range(0, n, block_size))]


def map_blocks(fn: Callable[[int, int, int], T], n: int, workers: int = 1,
               block_size: int = BLOCK_SIZE) -> list[T]:
    """Apply ``fn(block, start, stop)`` to every block; results are in block order."""
    layout = blocks(n, block_size)
    if workers <= 1 or len(layout) <= 1:
        return [fn(*blk) for blk in layout]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda blk: fn(*blk), layout))


def pairwise_sum(values: Sequence[np.ndarray] | np.ndarray):
    """Sum in a fixed pairwise tree so totals do not depend on chunking."""
    values = list(values)
    if not values:
        return 0.0
    while len(values) > 1:
        paired = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            paired.append(values[-1])
        values = paired
    return values[0]
