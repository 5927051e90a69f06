"""Binary tensor checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"APNLAB\\x00\\x01"
    version      uint8     currently 1
    count        uint32    number of records
    record * count:
        name_len uint16
        name     name_len bytes, UTF-8
        dtype    uint8     0=float32 1=float64 2=int64 3=uint8
        rank     uint8
        extents  rank * uint32
        data     prod(extents) * itemsize bytes, little-endian, row-major

Records are written in the order given; readers return them in file order.
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"APNLAB\x00\x01"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {dt.newbyteorder("=") if dt.itemsize > 1 else dt: tag for tag, dt in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _tag_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=") if arr.dtype.itemsize > 1 else arr.dtype
    if dt == np.dtype(np.int32):
        dt = np.dtype(np.int64)
    if dt == np.dtype(np.bool_):
        dt = np.dtype(np.uint8)
    try:
        return _TAGS[dt]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        tag = _tag_for(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _loads(blob)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None


def _loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not an apnlab checkpoint")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<BI", blob, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 5
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"record {name!r}: truncated data")
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
