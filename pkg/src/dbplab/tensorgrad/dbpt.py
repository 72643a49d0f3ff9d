"""DBPT binary tensor container.

Layout of one record: magic ``b"DBPT"``, version u32 LE, dtype code u8
(0 = f32, 1 = f64), ndim u8, each dim as u64 LE, then the raw little-endian
values in row-major order. Files may hold several records back to back.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, List

import numpy as np

from ..errors import FormatError

MAGIC = b"DBPT"
VERSION = 1
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data)


def encode(x) -> bytes:
    arr = _as_array(x)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    return head + dims + body


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated DBPT record")
    return buf


def read_record(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError("bad DBPT magic" if magic else "truncated DBPT record")
    version, code, ndim = struct.unpack("<IBB", _read_exact(fh, 6))
    if version != VERSION:
        raise FormatError(f"unsupported DBPT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save(path, tensors) -> None:
    """Write one tensor, or a sequence of tensors as consecutive records."""
    if isinstance(tensors, (list, tuple)):
        blobs = [encode(t) for t in tensors]
    else:
        blobs = [encode(tensors)]
    Path(path).write_bytes(b"".join(blobs))


def load_all(path) -> List[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            peek = fh.read(1)
            if not peek:
                break
            fh.seek(-1, 1)
            out.append(read_record(fh))
    if not out:
        raise FormatError("empty DBPT file")
    return out


def load(path) -> np.ndarray:
    records = load_all(path)
    if len(records) != 1:
        raise FormatError(f"expected one record, found {len(records)}")
    return records[0]
