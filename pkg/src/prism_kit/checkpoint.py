"""Single-file checkpoint container.

Layout (all integers little-endian):

    magic   6 bytes   b"PKCKPT"
    version u32       container format version (currently 1)
    u64               manifest length
    bytes             manifest: UTF-8 JSON, sorted keys
    u32               number of parameter blocks
    per block:
        u16 name length, name (UTF-8)
        u8  dtype string length, dtype string (numpy little-endian spec)
        u8  ndim, then ndim x u64 shape
        u64 payload length, raw little-endian payload

Blocks are written in sorted name order, and the manifest JSON is canonical,
so re-saving an unmodified checkpoint reproduces it byte for byte. Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"PKCKPT"
FORMAT_VERSION = 1


@dataclass
class CheckpointManifest:
    config_digest: str
    step: int
    losses: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    """sha256 over the canonical JSON serialization of a config mapping."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def write_checkpoint(path, manifest: CheckpointManifest, blocks: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", FORMAT_VERSION)
    manifest_bytes = canonical_json(asdict(manifest)).encode()
    payload += struct.pack("<Q", len(manifest_bytes))
    payload += manifest_bytes
    payload += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name])
        dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(dtype, copy=False)
        name_bytes = name.encode()
        dtype_bytes = dtype.str.encode()
        payload += struct.pack("<H", len(name_bytes)) + name_bytes
        payload += struct.pack("<B", len(dtype_bytes)) + dtype_bytes
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        raw = arr.tobytes()
        payload += struct.pack("<Q", len(raw)) + raw

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(payload))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"{self.path}: truncated (needed {n} bytes at offset {self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    (manifest_len,) = reader.unpack("<Q")
    try:
        manifest_dict = json.loads(reader.take(manifest_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptCheckpointError(f"{path}: manifest unreadable: {err}") from err
    manifest = CheckpointManifest(**manifest_dict)

    (n_blocks,) = reader.unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (dtype_len,) = reader.unpack("<B")
        dtype = np.dtype(reader.take(dtype_len).decode())
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (payload_len,) = reader.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if payload_len != expected:
            raise CorruptCheckpointError(
                f"{path}: block {name!r} declares {payload_len} bytes, shape needs {expected}"
            )
        raw = reader.take(payload_len)
        blocks[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise CorruptCheckpointError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return manifest, blocks
