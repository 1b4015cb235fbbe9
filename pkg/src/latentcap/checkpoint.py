"""Versioned little-endian checkpoint container.

Layout::

    b"LADX" | u32 version | 32-byte config digest
    u32 meta length | meta JSON (utf-8, sorted keys)
    u32 blob count
    per blob: u16 name length | name | u8 dtype | u8 ndim | u32 * ndim shape | u64 nbytes | data
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LADX"
VERSION = 1

_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "|u1"),
    4: (torch.bool, "|b1"),
    5: (torch.int32, "<i4"),
}
_CODES = {t: c for c, (t, _) in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def dumps(meta: dict, tensors: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(digest)
    mj = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(mj)))
    buf.write(mj)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        code = _CODES[t.dtype]
        nb = name.encode("utf-8")
        data = t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes):
    """Parse a checkpoint; returns ``(meta, tensors, digest)``."""
    if len(raw) < 4 + 4 + 32 + 32:
        raise ChecksumError("checkpoint truncated")
    body, check = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != check:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted file)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {VERSION}")
    digest = body[8:40]
    off = 40
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dtype, np_dtype = _DTYPES[code]
        arr = np.frombuffer(body[off:off + nbytes], dtype=np_dtype).reshape(shape)
        off += nbytes
        tensors[name] = torch.from_numpy(arr.copy())
    if off != len(body):
        raise CheckpointError("trailing bytes after last blob")
    return meta, tensors, digest


def save(path, meta, tensors, digest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(meta, tensors, digest))
    tmp.replace(path)


def load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
