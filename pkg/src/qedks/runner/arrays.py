"""Array files: 64-byte little-endian header followed by row-major data.

Header layout: magic ``QEDKSARR`` (8 bytes), ``u16`` version, ``u16`` dtype
code (1 = float64, 2 = complex128), ``u32`` ndim, six ``u64`` dimensions
(unused ones zero).
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QEDKSARR"
VERSION = 1
MAX_DIMS = 6
_HEADER = struct.Struct("<8sHHI6Q")
_CODES = {np.dtype("<f8"): 1, np.dtype("<c16"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}
CSV_MAX_ENTRIES = 200_000

assert _HEADER.size == 64


class ArrayFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = np.dtype("<c16") if np.iscomplexobj(arr) else np.dtype("<f8")
    arr = np.asarray(arr, dtype=dt, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > MAX_DIMS:
        raise ArrayFormatError(f"at most {MAX_DIMS} dimensions supported")
    dims = list(arr.shape) + [0] * (MAX_DIMS - arr.ndim)
    return _HEADER.pack(MAGIC, VERSION, _CODES[dt], arr.ndim, *dims) + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ArrayFormatError("truncated header")
    magic, ver, code, ndim, *dims = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ArrayFormatError("bad magic")
    if ver != VERSION:
        raise ArrayFormatError(f"unsupported version {ver}")
    if code not in _DTYPES or ndim > MAX_DIMS:
        raise ArrayFormatError("bad dtype code or rank")
    shape = tuple(dims[:ndim])
    dt = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - _HEADER.size != need:
        raise ArrayFormatError(f"payload has {len(buf) - _HEADER.size} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(shape).copy()


def write_array(path, arr: np.ndarray, csv_mirror: bool = True) -> Path:
    path = Path(path)
    path.write_bytes(encode(arr))
    arr = np.asarray(arr)
    if csv_mirror and arr.size <= CSV_MAX_ENTRIES:
        write_csv(path.with_suffix(".csv"), arr)
    return path


def read_array(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_csv(path, arr: np.ndarray) -> None:
    """First axis as rows, remaining axes flattened; complex values as ``re+imj``."""
    arr = np.asarray(arr)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{i}" for i in range(flat.shape[1])])
        for row in flat:
            w.writerow([repr(complex(v)) if np.iscomplexobj(arr) else repr(float(v)) for v in row])
