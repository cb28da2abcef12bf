"""Binary checkpoint format.

Layout (little-endian): magic ``EMHACKP1`` | u32 version | u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
u8 rank, u32 extents[rank], raw row-major payload.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointFormatError
from .tensor import Tensor

MAGIC = b"EMHACKP1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def to_bytes(params: Mapping[str, Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        code = _CODES.get(data.dtype)
        if code is None:
            raise CheckpointFormatError(f"unsupported dtype {data.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, requires_grad: bool = True) -> dict[str, Tensor]:
    from .model import ParamStore

    view = memoryview(buf)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(8)) != MAGIC:
        raise CheckpointFormatError("bad magic; not an EMHA checkpoint")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    store = ParamStore()
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = bytes(read(n)).decode("utf-8")
        code, rank = struct.unpack("<BB", read(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(read(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if name in store:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        store[name] = Tensor(arr, requires_grad=requires_grad)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return store


def save(path, params: Mapping[str, Tensor]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(params))
    os.replace(tmp, path)


def load(path, requires_grad: bool = True) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), requires_grad)
