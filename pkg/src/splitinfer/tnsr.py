"""TNSR: the raw tensor blob embedded in weight and cache files.

Layout (all little-endian)::

    b"TNSR"  u8 version=1  u8 rank  u32 dims[rank]  f32 payload (row-major)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1
_F32 = np.dtype("<f4")


def tnsr_size(shape) -> int:
    return 6 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if not 1 <= a.ndim <= 4:
        raise FormatError(f"TNSR holds rank 1..4 tensors, got rank {a.ndim}")
    if a.dtype != np.float32:
        raise FormatError(f"TNSR holds float32 data, got {a.dtype}")
    head = MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_F32).tobytes()


def decode_tensor(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    mv = memoryview(buf)
    if len(mv) < offset + 6:
        raise FormatError("truncated TNSR header")
    if bytes(mv[offset : offset + 4]) != MAGIC:
        raise FormatError(f"bad TNSR magic at byte {offset}")
    version, rank = struct.unpack_from("<BB", mv, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if not 1 <= rank <= 4:
        raise FormatError(f"TNSR rank {rank} outside 1..4")
    pos = offset + 6
    if len(mv) < pos + 4 * rank:
        raise FormatError("truncated TNSR dims")
    shape = struct.unpack_from(f"<{rank}I", mv, pos)
    pos += 4 * rank
    if min(shape) < 1:
        raise FormatError(f"TNSR dims must be positive, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(mv) < end:
        raise FormatError(f"truncated TNSR payload: need {4 * count} bytes, have {len(mv) - pos}")
    arr = np.frombuffer(mv[pos:end], dtype=_F32).astype(np.float32).reshape(shape)
    return arr, end
