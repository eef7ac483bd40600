"""SINW weight files.

Layout (little-endian)::

    b"SINW"  u8 version=1  u32 spec_fingerprint  u32 record_count
    record*: u16 name_len  name (utf-8)  TNSR blob
    u32 CRC32 of every preceding byte

Batchnorm state is stored as four records per layer:
``<bn>.gamma``, ``<bn>.beta``, ``<bn>.running_mean``, ``<bn>.running_var``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from ..errors import FingerprintError, FormatError
from ..ops import BatchNormState
from ..tnsr import decode_tensor, encode_tensor
from .network import Network, param_layout
from .spec import ModelSpec

MAGIC = b"SINW"
VERSION = 1
_BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


def _records(net: Network):
    for name in sorted(net.params):
        yield name, net.params[name]
    for bn in sorted(net.bn_states):
        st = net.bn_states[bn]
        for f in _BN_FIELDS:
            yield f"{bn}.{f}", getattr(st, f)


def encode_weights(net: Network) -> bytes:
    recs = list(_records(net))
    out = bytearray(MAGIC + struct.pack("<BII", VERSION, net.spec.fingerprint(), len(recs)))
    for name, arr in recs:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + encode_tensor(arr)
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save_weights(net: Network, path) -> None:
    Path(path).write_bytes(encode_weights(net))


def decode_weights(spec: ModelSpec, data: bytes) -> Network:
    if len(data) < 4 + 1 + 4 + 4 + 4:
        raise FormatError("weight file too short")
    if data[:4] != MAGIC:
        raise FormatError("not a SINW weight file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("weight file is corrupt or truncated (CRC32 mismatch)")
    version, fp, count = struct.unpack_from("<BII", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported SINW version {version}")
    if fp != spec.fingerprint():
        raise FingerprintError(
            f"weight file was written for spec fingerprint {fp:08x}, not {spec.name} ({spec.fingerprint():08x})"
        )
    pos = 13
    tensors = {}
    for _ in range(count):
        if pos + 2 > len(body):
            raise FormatError("truncated record header")
        (n,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + n].decode()
        try:
            tensors[name], pos = decode_tensor(body, pos + 2 + n)
        except FormatError as e:
            raise FormatError(f"record {name!r}: {e}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the last record")

    convs, bns = param_layout(spec)
    params = {}
    for name, shape in [*convs.items(), ("head.b", (spec.num_classes,))]:
        if name not in tensors:
            raise FormatError(f"missing parameter {name!r}")
        if tensors[name].shape != tuple(shape):
            raise FormatError(f"parameter {name!r} has shape {tensors[name].shape}, expected {tuple(shape)}")
        params[name] = tensors[name]
    states = {}
    for bn, ch in bns.items():
        try:
            vals = {f: tensors[f"{bn}.{f}"] for f in _BN_FIELDS}
        except KeyError as e:
            raise FormatError(f"missing batchnorm record {e.args[0]!r}") from None
        if any(v.shape != (ch,) for v in vals.values()):
            raise FormatError(f"batchnorm {bn!r} vectors must have length {ch}")
        states[bn] = BatchNormState(**vals)
    return Network(spec, params, states)


def load_weights(spec: ModelSpec, path) -> Network:
    return decode_weights(spec, Path(path).read_bytes())
