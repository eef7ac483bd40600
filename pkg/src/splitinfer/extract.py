"""Object patches from frame sequences by background subtraction.

The background is a running average of past frames.  A pixel is foreground
when any channel deviates from that average by more than ``threshold``; a 3x3
majority vote then removes speckle.  Foreground regions become 8-connected
components whose bounding boxes are cropped and rescaled to patch size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import read_pnm, rescale, write_pnm
from .errors import ConfigurationError, DimensionError, InputError

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BackgroundModel:
    mean: np.ndarray
    alpha: float = 0.05
    threshold: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.mean.ndim != 3:
            raise DimensionError(f"background mean must be C x H x W, got {self.mean.shape}")

    @classmethod
    def from_frame(cls, frame: np.ndarray, alpha: float = 0.05, threshold: float = 0.15):
        return cls(np.array(frame, np.float32), alpha, threshold)


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def iou(self, other: "BBox") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        return inter / (self.area + other.area - inter) if inter else 0.0


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def update_background(bg: BackgroundModel, frame: np.ndarray) -> BackgroundModel:
    _same_shape(bg.mean, frame, "update_background")
    a = np.float32(bg.alpha)
    return replace(bg, mean=(np.float32(1) - a) * bg.mean + a * frame.astype(np.float32))


def majority_smooth(mask: np.ndarray) -> np.ndarray:
    """Keep a pixel iff at least 5 of its 3x3 neighbourhood (itself included) are set; outside is unset."""
    m = np.pad(mask.astype(np.uint8), 1)
    h, w = mask.shape
    votes = sum(m[i : i + h, j : j + w] for i in range(3) for j in range(3))
    return votes >= 5


def foreground_mask(bg: BackgroundModel, frame: np.ndarray) -> np.ndarray:
    _same_shape(bg.mean, frame, "foreground_mask")
    raw = np.abs(frame - bg.mean).max(axis=0) > bg.threshold
    return majority_smooth(raw)


def connected_components(mask: np.ndarray, min_area: int = 16) -> list[BBox]:
    """Bounding boxes of 8-connected components whose box area is at least ``min_area``, sorted by (y, x)."""
    labels, _ = ndimage.label(mask, structure=_EIGHT)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        box = BBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        if box.area >= min_area:
            boxes.append(box)
    boxes.sort(key=lambda b: (b.y, b.x))
    return boxes


def extract_patches(frame: np.ndarray, boxes, size=(32, 32)) -> list[np.ndarray]:
    _, fh, fw = frame.shape
    out = []
    for b in boxes:
        if b.x < 0 or b.y < 0 or b.w < 1 or b.h < 1 or b.x + b.w > fw or b.y + b.h > fh:
            raise InputError(f"box {b} lies outside the {fw}x{fh} frame")
        out.append(rescale(frame[:, b.y : b.y + b.h, b.x : b.x + b.w], *size))
    return out


def mse_frame_diff(a: np.ndarray, b: np.ndarray) -> float:
    _same_shape(a, b, "mse_frame_diff")
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BBox
    patch: np.ndarray


def detect_objects(frames, alpha=0.05, threshold=0.15, min_area=16, patch_size=(32, 32), warmup=0):
    """Run background subtraction over ``frames`` and yield a :class:`Detection` per object.

    The background starts as the first frame.  Frames with index below
    ``warmup`` only update the background.
    """
    bg = None
    for i, frame in enumerate(frames):
        if bg is None:
            bg = BackgroundModel.from_frame(frame, alpha, threshold)
            continue
        if i >= warmup:
            boxes = connected_components(foreground_mask(bg, frame), min_area)
            for box, patch in zip(boxes, extract_patches(frame, boxes, patch_size)):
                yield Detection(i, box, patch)
        bg = update_background(bg, frame)


# -- on-disk frame sequences and manifests ----------------------------------


def frame_paths(frames_dir) -> list[Path]:
    paths = sorted(Path(frames_dir).glob("frame_*.p[pg]m"))
    if not paths:
        raise InputError(f"{frames_dir}: no frame_%06d.ppm files")
    return paths


def write_frames(frames_dir, frames) -> None:
    d = Path(frames_dir)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_pnm(d / f"frame_{i:06d}.ppm", f)


def extract_to_dir(frames_dir, out_dir, alpha=0.05, threshold=0.15, min_area=16,
                   patch_size=(32, 32), warmup=0, labeler=None) -> list[dict]:
    """Extract patches from a numbered frame directory into ``out_dir/<class>/``.

    Without a ``labeler`` every patch lands in ``unlabeled/``.  A labeler maps
    ``(frame_index, BBox)`` to a class name, or ``None`` to drop the patch.
    Writes ``manifest.csv`` (frame, x, y, w, h, patch) and returns its rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = frame_paths(frames_dir)
    rows = []
    for det in detect_objects((read_pnm(p) for p in paths), alpha, threshold, min_area, patch_size, warmup):
        cls = "unlabeled" if labeler is None else labeler(det.frame, det.box)
        if cls is None:
            continue
        b = det.box
        rel = f"{cls}/f{det.frame:06d}_{b.x:03d}_{b.y:03d}.ppm"
        (out / cls).mkdir(exist_ok=True)
        write_pnm(out / rel, det.patch)
        rows.append({"frame": paths[det.frame].name, "x": b.x, "y": b.y, "w": b.w, "h": b.h, "patch": rel})
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "x", "y", "w", "h", "patch"])
        writer.writeheader()
        writer.writerows(rows)
    return rows
