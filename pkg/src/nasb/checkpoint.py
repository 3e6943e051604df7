"""NCKP checkpoints.

Layout (little-endian)::

    b"NCKP" u32 version
    4 x (u32 length, UTF-8 JSON)      meta, genotype, optimizer, rng
    u32 count
    count x (u16 name length, name, u8 dtype, u8 rank, rank x u32, payload)

The whole file is parsed before anything is returned, so a damaged file
never yields a partial checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .formats import FormatError, PathLike, Reader, VersionError, decode_array, encode_array, write_atomic

CKPT_MAGIC = b"NCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]
    genotype: Optional[dict] = None
    optimizer: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def _blob(obj) -> bytes:
    raw = b"" if obj is None else json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw


def _read_blob(r: Reader):
    n = r.u32()
    raw = bytes(r.take(n))
    if not raw:
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt JSON section ending at byte offset {r.offset}: {e}") from None


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    parts += [_blob(ckpt.meta), _blob(ckpt.genotype), _blob(ckpt.optimizer), _blob(ckpt.rng)]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        key = name.encode()
        if len(key) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(key)) + key + encode_array(np.asarray(arr)))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = Reader(buf)
    r.magic(CKPT_MAGIC)
    version = r.u32()
    if version != CKPT_VERSION:
        raise VersionError("checkpoint", version, CKPT_VERSION)
    meta = _read_blob(r) or {}
    genotype = _read_blob(r)
    optimizer = _read_blob(r) or {}
    rng = _read_blob(r) or {}
    tensors = {}
    for _ in range(r.u32()):
        n = r.unpack("<H")[0]
        name = bytes(r.take(n)).decode()
        tensors[name] = decode_array(r)
    if not r.at_end():
        raise FormatError(f"{len(buf) - r.offset} trailing bytes at byte offset {r.offset}")
    return Checkpoint(meta, tensors, genotype, optimizer, rng)


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    write_atomic(path, encode_checkpoint(ckpt))


def load_checkpoint(path: PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
