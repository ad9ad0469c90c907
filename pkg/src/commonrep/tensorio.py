"""CRTF tensor container.

Layout: magic ``b"CRTF"``, u8 version (1), u8 dtype (0 = f32, 1 = f64),
u8 rank, ``rank`` little-endian u32 extents, then the elements row-major in
little-endian byte order.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"CRTF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def write_tensor(f: BinaryIO, arr: np.ndarray, dtype: str = "f8") -> None:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _CODES:
        raise ValueError(f"unsupported dtype {dtype!r}; use f4 or f8")
    arr = np.asarray(arr)
    f.write(MAGIC)
    f.write(struct.pack("<BBB", VERSION, _CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = f.read(3)
    if len(head) != 3:
        raise FormatError("truncated header")
    version, code, rank = struct.unpack("<BBB", head)
    if version != VERSION:
        raise FormatError(f"unsupported CRTF version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    raw = f.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    body = f.read(n * dt.itemsize)
    if len(body) != n * dt.itemsize:
        raise FormatError(f"truncated data: expected {n} elements")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def dumps(arr: np.ndarray, dtype: str = "f8") -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr, dtype)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save(path: str | os.PathLike, arr: np.ndarray, dtype: str = "f8") -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr, dtype)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
