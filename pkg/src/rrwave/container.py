"""Versioned, CRC-protected binary container for named float32 tensors.

Layout (all integers little-endian)::

    magic (4 bytes) | version u32 | header length u32 | header JSON (UTF-8)
    | tensor count u32
    | per tensor: name length u16 | name UTF-8 | rank u8 | dims u32 * rank | float32 payload
    | CRC32 of every preceding byte (u32)

Model checkpoints use magic ``RRWN`` and preprocessed window stores ``RRWD``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagic, ChecksumMismatch, VersionUnsupported


def encode(magic: bytes, version: int, header: dict, tensors: dict) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, magic: bytes, versions):
    """Return ``(version, header, tensors)``; tensors come back as float32 arrays."""
    if blob[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {blob[:4]!r}")
    if len(blob) < 16:
        raise ChecksumMismatch("file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC32 mismatch (file truncated or corrupted)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version not in versions:
        raise VersionUnsupported(f"format version {version} not in {sorted(versions)}")
    off = 12
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
    if off != len(body):
        raise ChecksumMismatch(f"{len(body) - off} trailing bytes after last tensor")
    return version, header, tensors


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the target directory followed by ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
