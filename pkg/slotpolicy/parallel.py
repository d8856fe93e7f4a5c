"""
parallel.py - Worker-count resolution and ordered process-pool fan-out
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    """SLURM_CPUS_ON_NODE when running under SLURM, else the machine's core count."""
    return int(os.environ.get("SLURM_CPUS_ON_NODE", os.cpu_count() or 4))


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None or workers <= 0:
        return default_workers()
    return int(workers)


def chunk_evenly(items: Sequence[T], num_chunks: int) -> List[List[T]]:
    """Split into at most ``num_chunks`` contiguous chunks whose sizes differ by at most one."""
    if not items:
        return []
    num_chunks = max(1, min(num_chunks, len(items)))
    base, extra = divmod(len(items), num_chunks)
    chunks: List[List[T]] = []
    start = 0
    for idx in range(num_chunks):
        end = start + base + (1 if idx < extra else 0)
        chunks.append(list(items[start:end]))
        start = end
    return chunks


def map_chunks(fn: Callable[[List[T]], List[R]], items: Sequence[T], workers: Optional[int] = None) -> List[R]:
    """
    Apply ``fn`` to contiguous chunks of ``items`` and concatenate the results.

    Results come back in item order whatever the worker count, so callers
    that index results by position stay deterministic. ``fn`` must be a
    picklable module-level function when more than one worker is used.
    """
    chunks = chunk_evenly(items, resolve_workers(workers))
    if len(chunks) <= 1:
        return list(fn(list(items))) if items else []
    logger.debug("Fanning out %d items over %d workers", len(items), len(chunks))
    with ProcessPoolExecutor(max_workers=len(chunks)) as executor:
        parts = list(executor.map(fn, chunks))
    return [r for part in parts for r in part]
