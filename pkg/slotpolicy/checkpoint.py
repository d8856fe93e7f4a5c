"""
checkpoint.py - Flat binary parameter checkpoints ("SPCK")

Layout (little-endian):

    magic "SPCK" | version u32
    v2 only: metadata length u32 | metadata bytes (UTF-8 "key=value" lines)
    count u32
    per parameter: name length u16 | name bytes
                   v2 only: dtype u8 (0 = f32, 1 = f64)
                   rank u8 | dims u32 * rank | payload

Version 1 files (no metadata, f32 payload) are still readable.
"""

import logging
import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import CheckpointError, NonFiniteError

logger = logging.getLogger(__name__)

MAGIC = b"SPCK"
VERSION = 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

PathLike = Union[str, os.PathLike]


def encode_metadata(metadata: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in metadata.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"metadata entry '{key}' cannot contain newlines or '=' in the key")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(blob: bytes) -> Dict[str, str]:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def save_checkpoint(path: PathLike, params: Mapping[str, np.ndarray],
                    metadata: Optional[Mapping[str, object]] = None,
                    dtype: Optional[str] = None) -> str:
    """
    Write parameters to an SPCK file.

    Args:
        path: Output file path (written atomically via a temp file)
        params: name -> array, written in iteration order
        metadata: Optional key=value header (config echo, step, ...)
        dtype: Payload precision 'f32' or 'f64'; default follows each array

    Returns:
        The output path

    Raises:
        NonFiniteError: if any parameter contains NaN/Inf
    """
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = encode_metadata(metadata or {})
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"save_checkpoint: parameter '{name}' contains non-finite values")
        if dtype is not None:
            target = _DTYPES[0] if dtype == "f32" else _DTYPES[1]
        else:
            target = _DTYPES[_CODES.get(arr.dtype, 0)]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", 0 if target == _DTYPES[0] else 1, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=target).tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)
    logger.debug("Wrote checkpoint %s (%d tensors)", path, len(params))
    return str(path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """
    Read an SPCK file.

    Returns:
        (params, metadata): name -> array in stored precision, and the
        decoded key=value header (empty for version 1 files)
    """
    path = str(path)
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an SPCK checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version not in (1, 2):
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    metadata: Dict[str, str] = {}
    if version == 2:
        (meta_len,) = r.unpack("<I")
        metadata = decode_metadata(r.take(meta_len))
    (count,) = r.unpack("<I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code = 0
        if version == 2:
            (code,) = r.unpack("<B")
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for '{name}'")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes after last tensor")
    return params, metadata
