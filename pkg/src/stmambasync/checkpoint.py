"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"STMSCKPT"                magic
    u32 version
    u32 manifest length, then UTF-8 ``key=value`` lines
    u32 tensor count
    per tensor: u32 name length, name, u32 ndim, ndim x u64 dims,
                prod(dims) x f64 values (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STMSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in manifest.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"manifest entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    text = "\n".join(lines).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(text)), text,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major regardless
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return _parse(path.read_bytes(), path)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt ({e})") from None


def _parse(buf: bytes, path):
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, mlen = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = {}
    for line in buf[pos:pos + mlen].decode().splitlines():
        k, _, v = line.partition("=")
        manifest[k] = v
    pos += mlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        tensors[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return manifest, tensors
