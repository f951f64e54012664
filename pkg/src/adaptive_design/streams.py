"""Reproducible random streams and order-independent reductions.

Every replicate draws from its own generator derived from the master seed
and a tuple key, so results never depend on how replicates are scheduled
across threads.  Work is split into chunks of fixed size (independent of
the thread count) and reassembled in replicate order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np
from numpy.typing import NDArray

CHUNK_SIZE = 1000
THREADS_ENV = "ADL_THREADS"

T = TypeVar("T")


def replicate_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``key`` under ``master_seed``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def resolve_threads(threads: int | None) -> int:
    """``None`` falls back to ``$ADL_THREADS``; ``0`` means one per CPU."""
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads < 0:
        raise ValueError("thread count must be >= 0")
    return threads or (os.cpu_count() or 1)


def map_chunks(
    fn: Callable[[int, int], T],
    total: int,
    threads: int | None = 1,
    chunk_size: int = CHUNK_SIZE,
) -> list[T]:
    """Apply ``fn(start, stop)`` over fixed-size chunks of ``range(total)``."""
    bounds = [(s, min(s + chunk_size, total)) for s in range(0, total, chunk_size)]
    workers = min(resolve_threads(threads), max(len(bounds), 1))
    if workers <= 1:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def fsum_rows(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Exactly rounded sum over axis 0, independent of row order."""
    arr = np.asarray(values, dtype=np.float64)
    flat = arr.reshape(arr.shape[0], -1)
    out = np.array([math.fsum(col) for col in flat.T])
    return out.reshape(arr.shape[1:])


def jackknife_blocks(n: int, blocks: int = 100) -> Sequence[NDArray[np.intp]]:
    """Contiguous index blocks for a delete-a-block jackknife."""
    return np.array_split(np.arange(n), min(blocks, n))
