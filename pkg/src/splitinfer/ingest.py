"""Ingest phase: Top-K indexes from the cheap network plus cached cut-point feature maps.

Index file (UTF-8 text)::

    k=3
    classes=background,car,pedestrian
    <frame_id>,<c1>,<c2>,<c3>

Cache file "SINC" (little-endian)::

    b"SINC"  u8 version=1  u8 codec=0  u32 cut_id_len  cut_id  u32 record_count
    record*: u16 id_len  frame_id  TNSR blob  u32 CRC32(id_len .. end of blob)

Records are sorted by frame id.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CutError, DimensionError, FingerprintError, FormatError, InputError
from .extract import mse_frame_diff
from .model.network import Network, forward_prefix, forward_suffix
from .model.spec import CutPoint, cut_fingerprint
from .tnsr import decode_tensor, encode_tensor, tnsr_size

CACHE_MAGIC = b"SINC"
CACHE_VERSION = 1
CODEC_RAW = 0


@dataclass
class TopKIndex:
    k: int
    class_names: tuple[str, ...]
    entries: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.k <= len(self.class_names):
            raise InputError(f"k={self.k} outside 1..{len(self.class_names)}")

    def add(self, frame_id: str, classes) -> None:
        classes = [int(c) for c in classes]
        if frame_id in self.entries:
            raise InputError(f"duplicate frame id {frame_id!r}")
        if len(classes) != self.k or len(set(classes)) != self.k:
            raise InputError(f"{frame_id}: expected {self.k} distinct class ids, got {classes}")
        if min(classes) < 0 or max(classes) >= len(self.class_names):
            raise InputError(f"{frame_id}: class id outside 0..{len(self.class_names) - 1}")
        self.entries[frame_id] = classes

    def __len__(self):
        return len(self.entries)

    def restricted(self, frame_ids) -> "TopKIndex":
        keep = set(frame_ids)
        return TopKIndex(self.k, self.class_names, {f: c for f, c in self.entries.items() if f in keep})


@dataclass
class FeatureMapCache:
    """Feature maps keyed by frame id, all taken at one cut.  Entries are add-only."""

    cut_id: str
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, frame_id: str, fmap: np.ndarray) -> None:
        if frame_id in self.entries:
            raise InputError(f"frame {frame_id!r} already cached")
        if self.entries:
            shape = next(iter(self.entries.values())).shape
            if fmap.shape != shape:
                raise DimensionError(f"frame {frame_id!r}: feature map {fmap.shape} differs from cached {shape}")
        self.entries[frame_id] = fmap

    def __len__(self):
        return len(self.entries)

    @property
    def shape(self):
        return next(iter(self.entries.values())).shape if self.entries else None

    def stack(self, frame_ids) -> np.ndarray:
        missing = [f for f in frame_ids if f not in self.entries]
        if missing:
            raise KeyError(f"no cached feature map for frame {missing[0]!r}")
        if not frame_ids:
            return np.zeros((0, *(self.shape or (1, 1, 1))), np.float32)
        return np.stack([self.entries[f] for f in frame_ids])


@dataclass(frozen=True)
class IngestReport:
    frames_processed: int
    frames_skipped: int
    cache_bytes: int
    wall_time: float


def compute_topk(logits: np.ndarray, k: int) -> list[int]:
    """Class ids of the ``k`` largest scores, ties broken by smaller class id."""
    scores = np.asarray(logits).reshape(-1)
    if not 1 <= k <= len(scores):
        raise InputError(f"k={k} outside 1..{len(scores)}")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k].tolist()


def ingest_run(cheap: Network, images: np.ndarray, frame_ids, k: int, cut, mse_floor: float | None = None,
               batch_size: int = 64, out_index=None, out_cache=None, class_names=None):
    """Index and cache every frame that passes the optional MSE filter.

    Each kept batch runs the prefix once; the cached activation is then pushed
    through the rest of the cheap network for the Top-K ranking.  A frame whose
    MSE against the previous input frame is below ``mse_floor`` is skipped.
    Returns ``(index, cache, report)`` and writes the files when paths are given.
    """
    t0 = time.perf_counter()
    block = cut.block_index if isinstance(cut, CutPoint) else int(cut)
    cut_id = cut_fingerprint(cheap.spec, block)
    if isinstance(cut, CutPoint) and cut.cut_id != cut_id:
        raise CutError(f"cut id {cut.cut_id} does not describe block {block} of {cheap.spec.name}")
    frame_ids = list(frame_ids)
    if len(frame_ids) != len(images):
        raise DimensionError(f"{len(images)} images but {len(frame_ids)} frame ids")
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(cheap.spec.num_classes))
    kept = []
    for i in range(len(images)):
        if mse_floor is not None and i > 0 and mse_frame_diff(images[i], images[i - 1]) < mse_floor:
            continue
        kept.append(i)
    index = TopKIndex(k, names)
    cache = FeatureMapCache(cut_id)
    for s in range(0, len(kept), batch_size):
        idx = kept[s : s + batch_size]
        fmap = forward_prefix(cheap, images[idx], block)
        logits = forward_suffix(cheap, fmap, block)
        for j, i in enumerate(idx):
            index.add(frame_ids[i], compute_topk(logits[j], k))
            cache.add(frame_ids[i], fmap[j].copy())
    size = cache_file_size(cache)
    if out_index is not None:
        write_index(index, out_index)
    if out_cache is not None:
        write_cache(cache, out_cache)
    report = IngestReport(len(kept), len(images) - len(kept), size, time.perf_counter() - t0)
    return index, cache, report


# -- cache file --------------------------------------------------------------


def cache_file_size(cache: FeatureMapCache) -> int:
    total = 4 + 1 + 1 + 4 + len(cache.cut_id.encode()) + 4
    for fid, fmap in cache.entries.items():
        total += 2 + len(fid.encode()) + tnsr_size(fmap.shape) + 4
    return total


def encode_cache(cache: FeatureMapCache) -> bytes:
    cid = cache.cut_id.encode()
    out = bytearray(CACHE_MAGIC + struct.pack("<BBI", CACHE_VERSION, CODEC_RAW, len(cid)) + cid)
    out += struct.pack("<I", len(cache.entries))
    for fid in sorted(cache.entries):
        b = fid.encode()
        rec = struct.pack("<H", len(b)) + b + encode_tensor(cache.entries[fid])
        out += rec + struct.pack("<I", zlib.crc32(rec))
    return bytes(out)


def write_cache(cache: FeatureMapCache, path) -> None:
    Path(path).write_bytes(encode_cache(cache))


def decode_cache(data: bytes, expected_cut_id: str | None = None) -> FeatureMapCache:
    if len(data) < 10 or data[:4] != CACHE_MAGIC:
        raise FormatError("not a SINC cache file (bad magic)")
    version, codec, n = struct.unpack_from("<BBI", data, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported SINC version {version}")
    if codec != CODEC_RAW:
        raise FormatError(f"unsupported SINC codec {codec}")
    pos = 10
    if len(data) < pos + n + 4:
        raise FormatError("truncated SINC header")
    cut_id = data[pos : pos + n].decode()
    pos += n
    if expected_cut_id is not None and cut_id != expected_cut_id:
        raise FingerprintError(f"cache was written for cut {cut_id}, expected {expected_cut_id}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cache = FeatureMapCache(cut_id)
    prev = None
    for r in range(count):
        start = pos
        if pos + 2 > len(data):
            raise FormatError(f"record {r}: truncated before frame id")
        (n,) = struct.unpack_from("<H", data, pos)
        fid = data[pos + 2 : pos + 2 + n].decode(errors="replace")
        try:
            fmap, pos = decode_tensor(data, pos + 2 + n)
        except FormatError as e:
            raise FormatError(f"record {r} (frame {fid!r}): {e}") from None
        if pos + 4 > len(data):
            raise FormatError(f"record {r} (frame {fid!r}): truncated CRC")
        (crc,) = struct.unpack_from("<I", data, pos)
        if zlib.crc32(data[start:pos]) != crc:
            raise FormatError(f"record {r} (frame {fid!r}): CRC32 mismatch")
        pos += 4
        if prev is not None and fid <= prev:
            raise FormatError(f"record {r} (frame {fid!r}): frame ids not strictly sorted")
        prev = fid
        cache.add(fid, fmap)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last record")
    return cache


def read_cache(path, expected_cut_id: str | None = None) -> FeatureMapCache:
    return decode_cache(Path(path).read_bytes(), expected_cut_id)


# -- index file --------------------------------------------------------------


def write_index(index: TopKIndex, path) -> None:
    for name in index.class_names:
        if "," in name or "\n" in name:
            raise InputError(f"class name {name!r} cannot contain commas or newlines")
    lines = [f"k={index.k}", "classes=" + ",".join(index.class_names)]
    for fid, classes in index.entries.items():
        if "," in fid or "\n" in fid:
            raise InputError(f"frame id {fid!r} cannot contain commas or newlines")
        lines.append(",".join([fid, *map(str, classes)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_index(path) -> TopKIndex:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("k=") or not lines[1].startswith("classes="):
        raise FormatError("line 1: index must start with 'k=<K>' and 'classes=<names>' lines")
    try:
        k = int(lines[0][2:])
    except ValueError:
        raise FormatError("line 1: k is not an integer") from None
    names = tuple(lines[1][len("classes="):].split(","))
    try:
        index = TopKIndex(k, names)
    except InputError as e:
        raise FormatError(f"line 1: {e}") from None
    for lineno, line in enumerate(lines[2:], 3):
        if not line:
            continue
        fid, *rest = line.split(",")
        if len(rest) != k:
            raise FormatError(f"line {lineno}: expected {k} class ids after the frame id, got {len(rest)}")
        try:
            classes = [int(c) for c in rest]
        except ValueError:
            raise FormatError(f"line {lineno}: class ids must be integers") from None
        try:
            index.add(fid, classes)
        except InputError as e:
            raise FormatError(f"line {lineno}: {e}") from None
    return index
