"""
Tests for PPM image dumps
"""

import numpy as np
import pytest

from slotpolicy.images import read_ppm, to_uint8, write_ppm
from slotpolicy.tensor import Tensor


def test_float_images_scaled_and_clipped():
    img = np.array([[[0.0, 0.5, 1.0], [-0.2, 1.3, 0.25]]])
    assert to_uint8(img).tolist() == [[[0, 128, 255], [0, 255, 64]]]


def test_uint8_passthrough_and_tensor_input():
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    assert to_uint8(img) is img
    assert to_uint8(Tensor(np.ones((1, 1, 3)))).tolist() == [[[255, 255, 255]]]


def test_write_then_read(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = write_ppm(tmp_path / "frame.ppm", img)
    assert path.read_bytes().startswith(b"P6")
    assert np.array_equal(read_ppm(path), img)


def test_write_rejects_non_rgb(tmp_path):
    with pytest.raises(ValueError, match="expected"):
        write_ppm(tmp_path / "mask.ppm", np.zeros((4, 4)))
