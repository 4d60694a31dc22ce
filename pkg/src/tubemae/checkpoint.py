"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"U4DC" | u32 version | 32-byte config hash | u64 step | u32 n_tensors
    n_tensors x ( u16 name_len | name utf-8 | u8 dtype | u8 ndim | ndim x u32 dims | raw data )
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"U4DC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def encode_checkpoint(tensors: dict[str, np.ndarray], step: int, cfg_hash: bytes) -> bytes:
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<I", VERSION), cfg_hash, struct.pack("<QI", step, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], int, bytes]:
    off = 0

    def need(n):
        if off + n > len(buf):
            raise FormatError("truncated checkpoint", off)

    need(4 + 4 + 32 + 12)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg_hash = buf[8:40]
    step, count = struct.unpack_from("<QI", buf, 40)
    off = 52
    tensors = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(nlen + 2)
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", off - 2)
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        need(nbytes)
        tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after tensor table", off)
    return tensors, step, cfg_hash


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], step: int, cfg_hash: bytes):
    Path(path).write_bytes(encode_checkpoint(tensors, step, cfg_hash))


def load_checkpoint(path: str | Path):
    return decode_checkpoint(Path(path).read_bytes())
