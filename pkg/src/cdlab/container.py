"""Versioned binary container shared by dataset and checkpoint files.

Layout (little-endian)::

    b"CDL1" | u32 version | u64 payload length | payload | u32 CRC32(payload)

    payload = u32 json length | JSON metadata (UTF-8) | u32 array count |
              array records

    record  = u16 name length | name | u8 dtype code | u8 ndim |
              ndim x u64 dims | u64 byte length | raw bytes

Boolean arrays are bit-packed; float64 and int64 arrays are stored raw.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CDL1"
_HEADER = struct.Struct("<4sIQ")
_F64, _BOOL, _I64 = 0, 1, 2


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class ContainerFormatError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerTruncatedError(ContainerError):
    pass


class ContainerChecksumError(ContainerError):
    pass


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        code, raw = _BOOL, np.packbits(arr.ravel(), bitorder="little").tobytes()
    elif np.issubdtype(arr.dtype, np.integer):
        code, raw = _I64, arr.astype("<i8").tobytes()
    else:
        code, raw = _F64, arr.astype("<f8").tobytes()
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<Q", len(raw)) + raw


def dumps(version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(arrays))]
    parts += [_encode_array(name, arr) for name, arr in arrays.items()]
    payload = b"".join(parts)
    return (
        _HEADER.pack(MAGIC, version, len(payload))
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerFormatError("record extends past end of payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(data: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _HEADER.size:
        raise ContainerTruncatedError(f"file holds {len(data)} bytes, header needs {_HEADER.size}")
    magic, found, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if found != version:
        raise ContainerVersionError(
            f"container version {found} is not supported (this build reads version {version})"
        )
    end = _HEADER.size + length
    if len(data) < end + 4:
        raise ContainerTruncatedError(
            f"file holds {len(data)} bytes, expected {end + 4}"
        )
    payload = data[_HEADER.size : end]
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(payload) != crc:
        raise ContainerChecksumError("payload CRC32 mismatch")
    r = _Reader(payload)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        raw = r.take(nbytes)
        if code == _BOOL:
            size = int(np.prod(shape, dtype=np.int64))
            bits = np.unpackbits(np.frombuffer(raw, np.uint8), count=size, bitorder="little")
            arrays[name] = bits.astype(bool).reshape(shape)
        elif code == _I64:
            arrays[name] = np.frombuffer(raw, "<i8").astype(np.int64).reshape(shape)
        elif code == _F64:
            arrays[name] = np.frombuffer(raw, "<f8").astype(np.float64).reshape(shape)
        else:
            raise ContainerFormatError(f"unknown dtype code {code} for array {name!r}")
    return meta, arrays


def write(path: str | Path, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(version, meta, arrays))


def read(path: str | Path, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), version)
