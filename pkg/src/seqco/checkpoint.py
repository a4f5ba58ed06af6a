"""Binary tensor archive.

Layout (all integers little-endian uint32)::

    b"SEQC1" | count | count x (name_len | name utf-8 | rank | dims... | float32 data)

Values are stored as 32-bit floats, so float32 tensors round-trip bit-exactly.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEQC1"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed archive; the message carries the byte offset of the problem."""


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.issubdtype(a.dtype, np.number):
            raise TypeError(f"{name}: non-numeric dtype {a.dtype}")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(a.ndim)]
        parts += [_U32.pack(d) for d in a.shape]
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a whole archive or raise; never returns a partial result."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated at byte {pos}: need {n} bytes for {what}, "
                                  f"{len(buf) - pos} left")
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic at byte 0")
    count = u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        start = pos
        try:
            name = take(u32(f"name length of tensor {i}"), f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name at byte {start} is not valid UTF-8") from None
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r} at byte {start}")
        rank = u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name} at byte {pos - 4}")
        shape = tuple(u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        data = take(4 * n, f"data of {name}")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes at byte {pos}")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: readers see either the old file or the complete new one."""
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        return decode(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
