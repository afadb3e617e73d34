"""Parameter checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes   b"PPCK"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (run configuration, step counters, ...)
    count      u32       number of tensors
    count x entry:
        name_len  u16
        name      bytes  UTF-8, dot-separated hierarchical name
        ndim      u8
        dims      u32 * ndim
        payload   f32 * prod(dims), little-endian, C order
    crc32      u32       zlib.crc32 of every preceding byte

Entries are written in sorted name order so identical parameters give
byte-identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<HB", len(raw), arr.ndim))
        chunks.append(raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", body, off)
            off += 3
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            dims = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated entry table ({exc})") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after entry table")
    return params, meta
