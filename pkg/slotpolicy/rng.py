"""
rng.py - Splittable counter-based random streams

Every stochastic operation takes an explicit Stream. A stream is identified by
its root seed plus a path of integer labels; splitting appends a label, so the
numbers a component sees depend only on where it sits in the run, never on the
order in which other components consumed randomness.
"""

import zlib
from typing import Tuple, Union

import numpy as np

Label = Union[int, str]


def _label_to_int(label: Label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise ValueError(f"Stream labels must be non-negative, got {label}")
    return int(label)


class Stream:
    """
    Handle on one independent random stream.

    Args:
        seed: Root seed of the run
        path: Split labels leading to this stream

    Examples:
        >>> root = Stream(7)
        >>> episode = root.split("episode", 3)
        >>> x = episode.generator().normal(size=4)
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def split(self, *labels: Label) -> "Stream":
        """Derive a child stream; identical labels always give the same child."""
        return Stream(self.seed, self.path + tuple(_label_to_int(l) for l in labels))

    def generator(self) -> np.random.Generator:
        """Fresh Philox generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def integer_seed(self) -> int:
        """A 63-bit integer derived from this stream (for seeding sub-systems)."""
        return int(self.generator().integers(0, 2**63 - 1))

    def __eq__(self, other) -> bool:
        return isinstance(other, Stream) and (self.seed, self.path) == (other.seed, other.path)

    def __hash__(self) -> int:
        return hash((self.seed, self.path))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={self.path})"
