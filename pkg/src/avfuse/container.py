"""Binary container for named float64 tensors plus a text metadata block.

Layout (little-endian)::

    magic[8] | u32 version | u32 len, utf-8 metadata | u32 count |
    count * (u32 len, utf-8 name | u32 rank | rank * u32 extent | f64 payload) |
    u32 CRC32 of everything before it
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_MAGIC = b"NAVACKPT"
VERSION = 1


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class SchemaError(ContainerError):
    pass


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(tensors: Mapping[str, np.ndarray], meta: str = "", magic: bytes = CKPT_MAGIC,
           version: int = VERSION) -> bytes:
    parts = [magic, struct.pack("<I", version), _str(meta), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        parts += [_str(name), struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr).tobytes()]
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode(buf: bytes, magic: bytes = CKPT_MAGIC, version: int = VERSION):
    """Return ``(metadata, {name: array})``; raises on magic/version/CRC problems."""
    if len(buf) < len(magic) + 12:
        raise ChecksumError("container too short")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("CRC32 mismatch (truncated or corrupt container)")
    if payload[:len(magic)] != magic:
        raise ContainerError(f"bad magic {payload[:len(magic)]!r}, expected {magic!r}")
    pos = len(magic)

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise ContainerError("unexpected end of container payload")
        out = payload[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    found = u32()
    if found != version:
        raise ContainerError(f"unsupported container version {found} (expected {version})")
    meta = take(u32()).decode("utf-8")
    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(payload):
        raise ContainerError(f"{len(payload) - pos} trailing bytes in container")
    return meta, tensors


def write(path, tensors: Mapping[str, np.ndarray], meta: str = "") -> None:
    Path(path).write_bytes(encode(tensors, meta))


def read(path):
    return decode(Path(path).read_bytes())


def check_schema(found: Mapping[str, np.ndarray], schema: Mapping[str, tuple], what: str = "tensor") -> None:
    """Require exactly the names and shapes of ``schema``."""
    for name, shape in schema.items():
        if name not in found:
            raise SchemaError(f"missing {what} {name!r}")
        if tuple(found[name].shape) != tuple(shape):
            raise SchemaError(f"{what} {name!r} has shape {tuple(found[name].shape)}, expected {tuple(shape)}")
    for name in found:
        if name not in schema:
            raise SchemaError(f"unexpected {what} {name!r}")


def format_kv(items: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"malformed metadata line {line!r}")
        out[key.strip()] = value.strip()
    return out
