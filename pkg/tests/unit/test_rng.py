"""
Tests for splittable random streams
"""

import numpy as np
import pytest

from slotpolicy.rng import Stream


def test_same_path_same_numbers():
    a = Stream(5).split("episode", 2).generator().normal(size=8)
    b = Stream(5).split("episode", 2).generator().normal(size=8)
    assert np.array_equal(a, b)


def test_sibling_streams_differ():
    root = Stream(5)
    a = root.split("episode", 1).generator().normal(size=8)
    b = root.split("episode", 2).generator().normal(size=8)
    assert not np.array_equal(a, b)


def test_seed_changes_stream():
    a = Stream(1).split("x").generator().normal(size=4)
    b = Stream(2).split("x").generator().normal(size=4)
    assert not np.array_equal(a, b)


def test_split_is_independent_of_consumption_order():
    root = Stream(9)
    first = root.split("slots").generator().normal(size=4)
    root.split("batch").generator().normal(size=1000)
    again = root.split("slots").generator().normal(size=4)
    assert np.array_equal(first, again)


def test_split_labels_compose():
    assert Stream(3).split("a").split(7) == Stream(3).split("a", 7)
    assert hash(Stream(3).split("a", 7)) == hash(Stream(3, Stream(3).split("a", 7).path))


def test_negative_label_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        Stream(0).split(-1)


def test_no_global_rng_pollution():
    np.random.seed(42)
    expected = np.random.random(3)
    np.random.seed(42)
    Stream(11).split("noise").generator().normal(size=100)
    assert np.array_equal(np.random.random(3), expected)


def test_integer_seed_range_and_stability():
    s = Stream(4).split("sub")
    value = s.integer_seed()
    assert 0 <= value < 2**63 - 1
    assert value == Stream(4).split("sub").integer_seed()
