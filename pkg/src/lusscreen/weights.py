"""LSW1 weight archives.

Layout (all integers little-endian)::

    b"LSW1"                       magic
    u32                           tensor count
    per tensor:
        u16                       name length in bytes
        name                      UTF-8
        u8                        dtype (0 = float32)
        u8                        ndim
        ndim * u32                dims
        prod(dims) * f32          payload
    u32                           CRC32 (zlib) of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from collections.abc import Iterator, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DuplicateNameError,
    RenameCollisionError,
    TruncatedError,
    WeightFormatError,
)

MAGIC = b"LSW1"
DTYPE_F32 = 0
MAX_NAME_BYTES = 0xFFFF


class WeightArchive(Mapping):
    """Ordered, read-only mapping of parameter name -> float32 array."""

    format_version = 1

    def __init__(self, entries=()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        data: dict[str, np.ndarray] = {}
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError(f"weight names must be non-empty strings, got {name!r}")
            if len(name.encode("utf-8")) > MAX_NAME_BYTES:
                raise ValueError(f"weight name longer than {MAX_NAME_BYTES} bytes: {name[:40]}...")
            if name in data:
                raise DuplicateNameError(f"duplicate weight name {name!r}")
            arr = np.array(value, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            data[name] = arr
        self._data = data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __eq__(self, other) -> bool:
        """Equal when names, order, dims and payload bytes all match."""
        if not isinstance(other, WeightArchive):
            return NotImplemented
        if list(self._data) != list(other._data):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._data.values(), other._data.values())
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"WeightArchive({len(self)} tensors, {self.num_values()} values)"

    def num_values(self) -> int:
        return sum(a.size for a in self._data.values())

    def updated(self, entries) -> "WeightArchive":
        """Copy with ``entries`` added or replaced; existing order is kept."""
        merged = dict(self._data)
        merged.update(dict(entries))
        return WeightArchive(merged)

    def subset(self, prefix: str) -> "WeightArchive":
        return WeightArchive((k, v) for k, v in self._data.items() if k.startswith(prefix))

    def without(self, prefix: str) -> "WeightArchive":
        return WeightArchive((k, v) for k, v in self._data.items() if not k.startswith(prefix))


def encode(archive: WeightArchive) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(archive))]
    for name, arr in archive.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> WeightArchive:
    """Parse LSW1 bytes; raises a specific :class:`WeightFormatError` subclass."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedError("file shorter than the LSW1 magic")
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedError(f"file of {len(buf)} bytes is too short for an LSW1 archive")

    # Structural walk first: a short file should be reported as truncated even
    # though its last four bytes also fail as a checksum.
    entries = []
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf) - 4:
            raise TruncatedError(f"archive truncated at byte {pos} (needed {n} more bytes)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    try:
        (count,) = struct.unpack("<I", take(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            dtype, ndim = struct.unpack("<BB", take(2))
            if dtype != DTYPE_F32:
                _check_crc(buf)
                raise WeightFormatError(f"tensor {name!r}: unsupported dtype code {dtype}")
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
            entries.append((name, dims, values))
    except UnicodeDecodeError as exc:
        # checksum failure is the likelier story for a garbled name
        _check_crc(buf)
        raise WeightFormatError(f"tensor name is not valid UTF-8: {exc}") from None

    if pos != len(buf) - 4:
        _check_crc(buf)
        raise WeightFormatError(f"{len(buf) - 4 - pos} unexpected bytes after the last tensor")
    _check_crc(buf)

    seen = set()
    for name, _, _ in entries:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
    return WeightArchive((name, values) for name, _, values in entries)


def _crc_status(buf: bytes):
    (stored,) = struct.unpack("<I", buf[-4:])
    computed = zlib.crc32(buf[:-4])
    return None if stored == computed else (stored, computed)


def _check_crc(buf: bytes) -> None:
    status = _crc_status(buf)
    if status is not None:
        stored, computed = status
        raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {computed:#010x}")


def save(archive: WeightArchive, path) -> None:
    data = encode(archive)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> WeightArchive:
    with open(path, "rb") as fh:
        return decode(fh.read())


def encoded_size(shapes) -> int:
    """Byte size of an archive holding tensors ``{name: dims}``."""
    total = 4 + 4 + 4
    for name, dims in shapes.items():
        total += 2 + len(name.encode("utf-8")) + 2 + 4 * len(dims) + 4 * int(np.prod(dims, dtype=np.int64))
    return total


def import_map(archive: WeightArchive, renames: Mapping[str, str]) -> WeightArchive:
    """Rename entries; names not in ``renames`` pass through in place."""
    missing = [old for old in renames if old not in archive]
    if missing:
        raise KeyError(f"rename sources not in archive: {missing}")
    out: dict[str, np.ndarray] = {}
    for name, value in archive.items():
        new = renames.get(name, name)
        if new in out:
            raise RenameCollisionError(f"rename target {new!r} collides with an existing entry")
        out[new] = value
    return WeightArchive(out)
