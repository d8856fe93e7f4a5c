"""
Unit tests for worker resolution and ordered fan-out
"""

import pytest

from slotpolicy.parallel import chunk_evenly, default_workers, map_chunks, resolve_workers


def square_chunk(items):
    return [x * x for x in items]


def test_slurm_sets_default_workers(slurm_environment):
    assert default_workers() == slurm_environment
    assert resolve_workers(0) == 16
    assert resolve_workers(None) == 16


def test_explicit_workers_win(slurm_environment):
    assert resolve_workers(3) == 3


@pytest.mark.parametrize("n,k", [(10, 3), (3, 8), (7, 7), (1, 1)])
def test_chunk_evenly(n, k):
    chunks = chunk_evenly(list(range(n)), k)
    assert [x for c in chunks for x in c] == list(range(n))
    sizes = [len(c) for c in chunks]
    assert max(sizes) - min(sizes) <= 1
    assert len(chunks) == min(n, k)


def test_chunk_evenly_empty():
    assert chunk_evenly([], 4) == []


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_map_chunks_keeps_order(workers):
    assert map_chunks(square_chunk, list(range(11)), workers) == [x * x for x in range(11)]


def test_map_chunks_empty():
    assert map_chunks(square_chunk, [], 2) == []
