"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CVNCKPT\\0"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 "key=value\\n" lines
    n_tensors  u32
    n_tensors times:
        name_len u16, name (UTF-8)
        ndim     u8, then ndim x u64 extents
        data     prod(extents) x f64
    crc32      u32 over every preceding byte
"""
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CVNCKPT\x00"
VERSION = 1


def write(path, tensors, meta=None):
    """Write ``tensors`` (name -> array) and ``meta`` (str -> str) atomically."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr).tobytes()]
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read(path):
    """Return ``(tensors, meta)``; raise :class:`CheckpointError` on any defect."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt)")
    try:
        pos = len(MAGIC) + 4
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta_text = body[pos : pos + meta_len].decode("utf-8")
        pos += meta_len
        meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(body):
                raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes after tensor table")
    return tensors, meta
