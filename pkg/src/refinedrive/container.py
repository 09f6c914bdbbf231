"""Named-array binary container shared by datasets, checkpoints and episode logs.

Layout (all integers little-endian)::

    magic     8 bytes  b"RDARRAY\\0"
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count     u32
    per array:
        name_len u16, name (UTF-8)
        dtype    u8   (0 float32, 1 float64, 2 int64)
        ndim     u8, then ndim x u32 shape
        payload  row-major, little-endian
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDARRAY\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class ContainerError(ValueError):
    pass


def dumps(arrays: dict, meta: dict | None = None, dtype=None) -> bytes:
    """Serialise ``arrays``; ``dtype`` forces every payload to one type (datasets use float32)."""
    out = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _CODES:
            arr = arr.astype(np.float64 if arr.dtype.kind == "f" else np.int64)
        code = _CODES[arr.dtype]
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(arrays, meta)``."""
    if data[:8] != MAGIC:
        raise ContainerError("not a named-array container (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
    return arrays, meta


def save(path, arrays: dict, meta: dict | None = None, dtype=None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta, dtype))
    tmp.replace(path)


def load(path):
    return loads(Path(path).read_bytes())
