"""Binary checkpoint format with bit-exact round trips.

Layout (all integers little-endian):

    magic   4 bytes  b"UNIC"
    version u32
    count   u32      number of entries
    entry*  u32 name length | UTF-8 name | u32 rank | u64 * rank extents
            | u32 dtype code (0 = float32 LE, 1 = float64 LE) | raw data
    digest  8 bytes  BLAKE2b-64 of every preceding byte

Loading verifies the digest and the magic/version before touching any
entry, then requires the file's parameter names to match the model's
exactly in both directions.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"UNIC"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Corrupt, mismatched, or unreadable checkpoint."""


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_checkpoint(model, path) -> None:
    """Write every named parameter of the model (or a name->Parameter dict)."""
    params = model.params if hasattr(model, "params") else model
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        data = np.ascontiguousarray(p.data)
        code = _CODES_BY_KIND.get(data.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {data.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(struct.pack("<I", code))
        chunks.append(data.astype(data.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_digest(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> dict:
    """Parse and verify a checkpoint file into a name -> array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 + 8:
        raise CheckpointError("file too short to be a checkpoint")
    payload, digest = raw[:-8], raw[-8:]
    if _digest(payload) != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(payload)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = r.u32()
    entries = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        code = r.u32()
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(shape)
        if name in entries:
            raise CheckpointError(f"duplicate parameter {name!r}")
        entries[name] = data
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after last entry")
    return entries


def load_checkpoint(model, path) -> None:
    """Restore model parameters; names must match exactly in both directions."""
    entries = read_checkpoint(path)
    for name in entries:
        if name not in model.params:
            raise CheckpointError(f"unknown parameter {name!r} not present in model")
    for name in model.params:
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
    for name, data in entries.items():
        p = model.params[name]
        if tuple(data.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {data.shape}, model {p.data.shape}"
            )
        p.tensor.data = np.ascontiguousarray(data, dtype=p.data.dtype)
