"""Reproducible random streams and a small worker pool.

Every stream is a Philox generator keyed by ``(seed, purpose, index...)``
through ``SeedSequence.spawn_key``, so the numbers a replica sees depend only
on its own key and never on which thread happens to run it.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

_default_threads: int | None = None


def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, (int, np.integer)):
        return int(purpose)
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str | int, *index: int) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, *index)``.

    ``purpose`` separates families of streams (environment draws, branching,
    Brownian drivers...) so that changing how many numbers one family uses never
    perturbs another.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (_purpose_key(purpose),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def set_default_threads(n: int | None) -> None:
    global _default_threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _default_threads = n


def default_threads() -> int:
    if _default_threads is not None:
        return _default_threads
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Ordered map over ``items``; ``threads`` never changes the result."""
    items = list(items)
    n = default_threads() if threads is None else threads
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(total: int, chunk: int) -> Sequence[tuple[int, int]]:
    """Split ``range(total)`` into fixed-size blocks ``(start, stop)``."""
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
