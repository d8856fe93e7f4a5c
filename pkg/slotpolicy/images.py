"""
images.py - PPM dumps of frames, reconstructions and slot decompositions
"""

import logging
import os
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def to_uint8(image) -> np.ndarray:
    """(H, W, 3) uint8 from uint8 input or floats in [0, 1]."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: PathLike, image) -> Path:
    """Write an RGB image as binary PPM (P6)."""
    path = Path(path)
    arr = to_uint8(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3) image, got {arr.shape}")
    Image.fromarray(arr).save(path, format="PPM")
    logger.debug("Wrote %s", path)
    return path


def read_ppm(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
