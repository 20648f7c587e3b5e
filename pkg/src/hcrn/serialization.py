"""Self-describing binary container for named arrays.

Byte layout (all integers little-endian)::

    magic      8 bytes   b"HCRNTDMP"
    version    u32       FORMAT_VERSION
    count      u32       number of records
    record * count:
        name_len  u16
        name      name_len bytes, UTF-8
        dtype     2 bytes ASCII: b"f8" float64, b"f4" float32, b"i8" int64
        ndim      u8
        shape     ndim * u64
        payload   prod(shape) * itemsize bytes, little-endian, row-major

Records keep insertion order.  A zero-dimensional array has ndim 0 and one
element of payload.
"""

from __future__ import annotations

import io
import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"HCRNTDMP"
FORMAT_VERSION = 1

_DTYPES = {b"f8": np.dtype("<f8"), b"f4": np.dtype("<f4"), b"i8": np.dtype("<i8")}
_TAGS = {v.kind + str(v.itemsize): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _tag(arr: np.ndarray) -> bytes:
    key = arr.dtype.kind + str(arr.dtype.itemsize)
    if arr.dtype.kind in "iub":
        key = "i8"
    if key not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _TAGS[key]


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(getattr(arr, "data", arr))
        tag = _tag(arr)
        arr = np.asarray(arr, dtype=_DTYPES[tag], order="C")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(tag)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise FormatError("not a tensor dump (bad magic)")
    version, count = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"tensor dump version {version} != supported {FORMAT_VERSION}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        tag = bytes(view[pos : pos + 2])
        pos += 2
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag!r} for {name!r}")
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise FormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(view):
        raise FormatError("trailing bytes after last record")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
