"""Binary checkpoints of named float64 parameter blocks.

Layout, all integers little-endian::

    header   6s magic b"DDCKPT" | uint16 version | uint64 body length   (16 bytes)
    body     per block: uint16 name length | name (utf-8) | uint8 ndim |
             ndim x uint64 dims | prod(dims) float64 values
    trailer  8-byte BLAKE2b digest of header + body

Loading checks, in order: length, magic, version, checksum, then parses.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDCKPT"
VERSION = 1
_HEADER = struct.Struct("<6sHQ")
_DIGEST = 8


class CheckpointError(Exception):
    kind = "checkpoint"


class TruncatedCheckpoint(CheckpointError):
    kind = "truncated"


class ChecksumMismatch(CheckpointError):
    kind = "checksum"


class VersionMismatch(CheckpointError):
    kind = "version"


class BadMagic(CheckpointError):
    kind = "magic"


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def encode_checkpoint(blocks) -> bytes:
    body = bytearray()
    for name, value in blocks.items():
        arr = np.asarray(value, dtype=np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"block {name!r}: name or rank too large")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape)
        body += arr.astype("<f8").tobytes()
    head = _HEADER.pack(MAGIC, VERSION, len(body))
    return head + bytes(body) + _digest(head + bytes(body))


def decode_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpoint(f"file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads version {VERSION}")
    end = _HEADER.size + length
    if len(raw) < end + _DIGEST:
        raise TruncatedCheckpoint(f"expected {end + _DIGEST} bytes, found {len(raw)}")
    if len(raw) > end + _DIGEST:
        raise ChecksumMismatch(f"{len(raw) - end - _DIGEST} trailing bytes after the checksum")
    if _digest(raw[:end]) != raw[end:end + _DIGEST]:
        raise ChecksumMismatch("checksum does not match contents")
    blocks, pos = {}, _HEADER.size
    while pos < end:
        (n,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 1)
        pos += 1 + 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return blocks


def save_checkpoint(blocks, path) -> Path:
    """Write atomically: a partial write never replaces a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(blocks))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
