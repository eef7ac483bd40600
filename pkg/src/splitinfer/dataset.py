"""Labeled patch datasets: PNM codec, bilinear rescaling, loading and stratified splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InputError

PNM_SUFFIXES = (".pgm", ".ppm")


@dataclass(frozen=True)
class PatchDataset:
    """Images ``N x C x H x W`` in [0, 1] with integer labels and per-item source ids."""

    images: np.ndarray
    labels: np.ndarray
    source_ids: tuple[str, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise InputError(f"a dataset needs at least 2 classes, got {len(self.class_names)}")
        n = len(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != n or len(self.source_ids) != n:
            raise DimensionError(
                f"images {self.images.shape}, {n} labels and {len(self.source_ids)} ids do not line up"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InputError("labels must index into class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def items(self):
        return list(zip(self.images, self.labels.tolist(), self.source_ids))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "PatchDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchDataset(
            self.images[idx], self.labels[idx], tuple(self.source_ids[i] for i in idx), self.class_names
        )


# -- PNM ---------------------------------------------------------------------


def _pnm_header(data: bytes):
    """Parse ``magic width height maxval`` and return them with the payload offset."""
    fields: list[bytes] = []
    pos = 0
    n = len(data)
    while len(fields) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        fields.append(data[start:pos])
    if pos >= n:
        raise FormatError("truncated PNM header")
    return fields, pos + 1  # exactly one whitespace byte before the raster


def decode_pnm(data: bytes) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) with maxval 255 -> ``C x H x W`` float32 in [0, 1]."""
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad PNM magic {data[:2]!r}; expected P5 or P6")
    fields, offset = _pnm_header(data)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-numeric PNM header field") from None
    if maxval != 255:
        raise FormatError(f"PNM maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError("PNM dimensions must be positive")
    channels = 1 if fields[0] == b"P5" else 3
    need = width * height * channels
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise FormatError(f"truncated PNM payload: need {need} bytes, have {len(raster)}")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_pnm(img: np.ndarray) -> bytes:
    """Inverse of :func:`decode_pnm` for ``1 x H x W`` or ``3 x H x W`` images in [0, 1]."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"expected 1xHxW or 3xHxW, got {img.shape}")
    c, h, w = img.shape
    px = np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + px.transpose(1, 2, 0).tobytes()


def read_pnm(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_pnm(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def write_pnm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(img))


# -- resampling --------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def rescale(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a ``C x H x W`` image."""
    if height < 1 or width < 1:
        raise InputError(f"target size must be at least 1x1, got {height}x{width}")
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.astype(np.float32, copy=True)
    x = np.asarray(img, np.float64)
    r0, r1, fr = _axis_weights(h, height)
    x = x[:, r0, :] * (1 - fr)[None, :, None] + x[:, r1, :] * fr[None, :, None]
    c0, c1, fc = _axis_weights(w, width)
    x = x[:, :, c0] * (1 - fc) + x[:, :, c1] * fc
    return x.astype(np.float32)


# -- loading and splitting ---------------------------------------------------


def load_patch_dataset(root, patch_size=(32, 32), channels: int = 3) -> PatchDataset:
    """Read ``<root>/<class>/*.pgm|*.ppm``; classes sorted by name, items by (class, filename).

    Grayscale files are replicated to ``channels`` planes.
    """
    root = Path(root)
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name) if root.is_dir() else []
    if not class_dirs:
        raise InputError(f"{root}: no class directories found")
    h, w = patch_size
    images, labels, ids = [], [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in PNM_SUFFIXES)
        if not files:
            raise InputError(f"{d}: class directory holds no .pgm/.ppm files")
        for f in files:
            img = read_pnm(f)
            if img.shape[0] != channels:
                if img.shape[0] != 1:
                    raise FormatError(f"{f}: has {img.shape[0]} channels, expected {channels} or 1")
                img = np.repeat(img, channels, axis=0)
            images.append(rescale(img, h, w))
            labels.append(label)
            ids.append(f"{d.name}/{f.name}")
    return PatchDataset(
        np.stack(images), np.asarray(labels, np.int64), tuple(ids), tuple(d.name for d in class_dirs)
    )


def split_train_test(ds: PatchDataset, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split; each class sends ``round(test_fraction * size)`` items to test.

    Both halves keep the original item order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < 2:
            raise InputError(f"class {ds.class_names[c]!r} has {len(members)} items; need at least 2")
        rng = np.random.default_rng([seed, c])
        n_test = math.floor(test_fraction * len(members) + 0.5)
        test_idx.extend(rng.permutation(members)[:n_test].tolist())
    is_test = np.zeros(len(ds), bool)
    is_test[test_idx] = True
    return ds.subset(np.flatnonzero(~is_test)), ds.subset(np.flatnonzero(is_test))
