"""Named-tensor binary container shared by checkpoints and activation dumps.

Layout (all integers little-endian)::

    magic      4 bytes   b"EPCK" | b"EACT"
    version    u32
    header     u32 length + UTF-8 JSON (sorted keys)
    count      u32 number of tensors
    tensors    repeated: u32 name length, UTF-8 name, u8 dtype tag,
               u8 rank, rank x u32 extents, little-endian payload

Tensors are written in sorted name order so identical content always
produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u4"): 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ContainerError(Exception):
    """Base class for container decoding failures."""


class FormatError(ContainerError):
    """Wrong magic: the file is some other kind of container."""


class VersionError(ContainerError):
    pass


class CorruptFileError(ContainerError):
    """Truncated or internally inconsistent file."""


def encode(magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<I", VERSION), struct.pack("<I", len(head)), head,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"unexpected end of file at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    got = r.take(4) if len(buf) >= 4 else buf
    if got != magic:
        if len(got) < 4:
            raise CorruptFileError("file shorter than its magic number")
        raise FormatError(f"expected magic {magic!r}, found {got!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (reader is {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"header is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in TAG_DTYPES:
            raise CorruptFileError(f"unknown dtype tag {tag} for tensor {name!r}")
        dt = TAG_DTYPES[tag]
        shape = r.unpack(f"<{rank}I") if rank else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return header, tensors


def write(path: str | Path, magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, header, tensors))


def read(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
