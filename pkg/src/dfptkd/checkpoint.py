"""Binary tensor container shared by model checkpoints and dataset files.

Layout (all integers little-endian)::

    b"DFPT" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_records
    record: u32 name_len | name | u8 dtype_len | dtype ("<f4", "<f8", "<i8", "|u1")
            | u32 ndim | u64 dims[ndim] | u64 nbytes | raw bytes
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DFPT"
VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _encode(arr: np.ndarray) -> tuple[str, bytes]:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    code = dt.str
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code, np.ascontiguousarray(arr, dtype=dt).tobytes()


def write_records(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_b = json.dumps(meta, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code, raw = _encode(arr)
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<B", len(code)) + code.encode())
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a DFPT file")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (count,) = r.unpack("<I")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (code_len,) = r.unpack("<B")
        code = r.take(code_len).decode()
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype {code!r}")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        dt = np.dtype(code)
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: record {name!r} length does not match its shape")
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return meta, arrays
