"""Little-endian binary containers: NTSR tensors, NLBL labels, atomic writes.

NTSR: ``b"NTSR"``, u8 version, u8 dtype code, u8 rank, rank x u32 extents,
row-major payload.  NLBL: ``b"NLBL"``, u32 count, count x u32.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

TENSOR_MAGIC = b"NTSR"
LABEL_MAGIC = b"NLBL"
TENSOR_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u4")}
CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    def __init__(self, expected: bytes, found: bytes):
        super().__init__(f"bad magic: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class VersionError(FormatError):
    def __init__(self, what: str, found: int, supported: int):
        super().__init__(f"{what} version {found} is not supported (expected {supported})")
        self.found = found
        self.supported = supported


class TruncatedError(FormatError):
    def __init__(self, offset: int, needed: int, available: int):
        super().__init__(f"truncated at byte offset {offset}: needed {needed} bytes, {available} available")
        self.offset = offset


class Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = memoryview(buf)
        self.offset = offset

    def take(self, n: int) -> memoryview:
        if n < 0 or self.offset + n > len(self.buf):
            raise TruncatedError(self.offset, n, len(self.buf) - self.offset)
        out = self.buf[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def magic(self, expected: bytes) -> None:
        found = bytes(self.take(len(expected)))
        if found != expected:
            raise BadMagicError(expected, found)

    def at_end(self) -> bool:
        return self.offset == len(self.buf)


def write_atomic(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in CODE_OF:
        raise FormatError(f"unsupported dtype {np.dtype(dtype)}")
    return CODE_OF[dt]


def encode_array(arr: np.ndarray) -> bytes:
    """dtype code, rank, extents and payload (shared by NTSR and checkpoints)."""
    arr = np.asarray(arr)
    code = dtype_code(arr.dtype)
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_array(r: Reader) -> np.ndarray:
    code, rank = r.unpack("<BB")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code} at byte offset {r.offset - 2}")
    shape = r.unpack(f"<{rank}I") if rank else ()
    dt = DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64))
    payload = r.take(n * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)


def encode_tensor(arr: np.ndarray) -> bytes:
    return TENSOR_MAGIC + struct.pack("<B", TENSOR_VERSION) + encode_array(arr)


def decode_tensor(buf: bytes) -> np.ndarray:
    r = Reader(buf)
    r.magic(TENSOR_MAGIC)
    version = r.u8()
    if version != TENSOR_VERSION:
        raise VersionError("tensor", version, TENSOR_VERSION)
    arr = decode_array(r)
    if not r.at_end():
        raise FormatError(f"{len(buf) - r.offset} trailing bytes after tensor payload")
    return arr


def write_tensor(path: PathLike, arr: np.ndarray) -> None:
    write_atomic(path, encode_tensor(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise FormatError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise FormatError("labels must fit in u32")
    return LABEL_MAGIC + struct.pack("<I", labels.size) + labels.astype("<u4").tobytes()


def decode_labels(buf: bytes) -> np.ndarray:
    r = Reader(buf)
    r.magic(LABEL_MAGIC)
    n = r.u32()
    out = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    if not r.at_end():
        raise FormatError(f"{len(buf) - r.offset} trailing bytes after labels")
    return out


def write_labels(path: PathLike, labels) -> None:
    write_atomic(path, encode_labels(labels))


def read_labels(path: PathLike) -> np.ndarray:
    return decode_labels(Path(path).read_bytes())
