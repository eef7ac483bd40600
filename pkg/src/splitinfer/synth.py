"""Deterministic synthetic traffic videos with ground-truth boxes.

``traffic_scene`` renders a static street (textured background, two car lanes,
two sidewalks) with cars, pedestrians and short brightness flickers.  The
flickers play the part of the subtractor's false positives and are labelled
``background``.  ``moving_square`` is the minimal single-object scene used to
check the extractor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extract import BBox, write_frames

CLASSES = ("background", "car", "pedestrian")


@dataclass(frozen=True)
class TruthBox:
    frame: int
    label: str
    box: BBox


def _static_background(rng, size: int) -> np.ndarray:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    base = np.stack([0.35 + 0.10 * xx, 0.40 + 0.05 * yy, 0.30 + 0.10 * (1 - xx)])
    # low-frequency texture: upsampled coarse noise
    coarse = rng.random((3, size // 8 + 1, size // 8 + 1))
    tex = np.kron(coarse, np.ones((8, 8)))[:, :h, :w]
    img = base + 0.08 * (tex - 0.5)
    road = slice(size * 5 // 16, size * 11 // 16)
    img[:, road, :] = 0.22 + 0.04 * (tex[:, road, :] - 0.5)
    img[:, size // 2, ::6] = 0.75  # lane markings
    return img.astype(np.float32)


def _clip(x, y, w, h, size):
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, size), min(y + h, size)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def _draw_car(img, x, y, color):
    size = img.shape[1]
    body = _clip(x, y, 14, 8, size)
    if body is None:
        return None
    img[:, body.y : body.y + body.h, body.x : body.x + body.w] = color[:, None, None]
    win = _clip(x + 3, y + 1, 8, 3, size)
    if win is not None:
        img[:, win.y : win.y + win.h, win.x : win.x + win.w] = np.array([0.85, 0.9, 0.95], np.float32)[:, None, None]
    return body


def _draw_pedestrian(img, x, y, color):
    size = img.shape[1]
    box = _clip(x, y, 5, 12, size)
    if box is None:
        return None
    body = _clip(x, y + 4, 5, 8, size)
    if body is not None:
        img[:, body.y : body.y + body.h, body.x : body.x + body.w] = color[:, None, None]
    head = _clip(x + 1, y, 3, 4, size)
    if head is not None:
        img[:, head.y : head.y + head.h, head.x : head.x + head.w] = np.array([0.95, 0.8, 0.65], np.float32)[:, None, None]
    return box


def traffic_scene(n_frames: int = 760, size: int = 64, seed: int = 0):
    """Render ``n_frames`` RGB frames; returns ``(frames, truth)`` with truth boxes clipped to the frame."""
    rng = np.random.default_rng(seed)
    bg = _static_background(rng, size)
    lanes = [(size * 11 // 32, +6), (size * 18 // 32, -6)]  # (top row, velocity)
    walks = [(size // 8 - 2, +2), (size * 6 // 8 + 1, -2)]
    cars, peds, flickers = [], [], []
    frames, truth = [], []
    for t in range(n_frames):
        for lane, (row, v) in enumerate(lanes):
            lane_cars = [c for c in cars if c["lane"] == lane]
            entry = -14 if v > 0 else size
            clear = all(abs(c["x"] - entry) > 30 for c in lane_cars)
            if clear and rng.random() < 0.06:
                color = rng.uniform(0.1, 1.0, 3).astype(np.float32)
                color[rng.integers(3)] = rng.uniform(0.75, 1.0)
                cars.append({"lane": lane, "x": entry, "y": row, "v": v, "color": color})
        for walk, (row, v) in enumerate(walks):
            walk_peds = [p for p in peds if p["walk"] == walk]
            entry = -5 if v > 0 else size
            clear = all(abs(p["x"] - entry) > 12 for p in walk_peds)
            if clear and rng.random() < 0.02:
                color = rng.uniform(0.0, 0.35, 3).astype(np.float32)
                peds.append({"walk": walk, "x": entry, "y": row + int(rng.integers(0, 3)), "v": v, "color": color})
        if rng.random() < 0.35:
            w, h = int(rng.integers(7, 13)), int(rng.integers(7, 13))
            flickers.append({
                "x": int(rng.integers(0, size - w)), "y": int(rng.integers(0, size - h)),
                "w": w, "h": h, "left": int(rng.integers(3, 6)),
                "gain": float(rng.choice([-1.0, 1.0]) * rng.uniform(0.22, 0.35)),
            })

        img = bg.copy()
        boxes = []
        for f in flickers:
            sl = (slice(None), slice(f["y"], f["y"] + f["h"]), slice(f["x"], f["x"] + f["w"]))
            img[sl] = np.clip(bg[sl] + f["gain"], 0, 1)
            boxes.append(("background", BBox(f["x"], f["y"], f["w"], f["h"])))
        for p in peds:
            b = _draw_pedestrian(img, p["x"], p["y"], p["color"])
            if b is not None:
                boxes.append(("pedestrian", b))
        for c in cars:
            b = _draw_car(img, c["x"], c["y"], c["color"])
            if b is not None:
                boxes.append(("car", b))
        frames.append(img)
        truth.extend(TruthBox(t, lab, b) for lab, b in boxes)

        for c in cars:
            c["x"] += c["v"]
        for p in peds:
            p["x"] += p["v"]
        for f in flickers:
            f["left"] -= 1
        cars = [c for c in cars if -14 < c["x"] < size]
        peds = [p for p in peds if -5 < p["x"] < size]
        flickers = [f for f in flickers if f["left"] > 0]
    return frames, truth


def moving_square(n_frames: int = 100, size: int = 64, side: int = 6, speed: int = 3, seed: int = 0):
    """One bright square bouncing over a dark textured background.

    Returns ``(frames, boxes)`` with one ground-truth :class:`BBox` per frame.
    """
    rng = np.random.default_rng(seed)
    bg = (0.1 + 0.05 * rng.random((3, size, size))).astype(np.float32)
    x, y = int(rng.integers(0, size - side)), int(rng.integers(0, size - side))
    vx, vy = speed, speed - 1
    frames, boxes = [], []
    for _ in range(n_frames):
        img = bg.copy()
        img[:, y : y + side, x : x + side] = 0.9
        frames.append(img)
        boxes.append(BBox(x, y, side, side))
        if not 0 <= x + vx <= size - side:
            vx = -vx
        if not 0 <= y + vy <= size - side:
            vy = -vy
        x, y = x + vx, y + vy
    return frames, boxes


def write_truth(path, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "label", "x", "y", "w", "h"])
        for t in truth:
            w.writerow([t.frame, t.label, t.box.x, t.box.y, t.box.w, t.box.h])


def read_truth(path) -> list[TruthBox]:
    with open(path, newline="") as fh:
        return [
            TruthBox(int(r["frame"]), r["label"], BBox(int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])))
            for r in csv.DictReader(fh)
        ]


def truth_labeler(truth, min_iou: float = 0.5, margin: float = 0.2):
    """Label a detection with the class of its best-overlapping truth box.

    Detections are dropped when no box reaches ``min_iou`` or when the runner-up
    of a different class is within ``margin`` of the best overlap.
    """
    by_frame: dict[int, list[TruthBox]] = {}
    for t in truth:
        by_frame.setdefault(t.frame, []).append(t)

    def label(frame: int, box: BBox):
        scored = sorted(((box.iou(t.box), t.label) for t in by_frame.get(frame, ())), reverse=True)
        if not scored or scored[0][0] < min_iou:
            return None
        rival = next((s for s, lab in scored[1:] if lab != scored[0][1]), 0.0)
        if scored[0][0] - rival < margin:
            return None
        return scored[0][1]

    return label


def write_scene(out_dir, n_frames: int = 760, size: int = 64, seed: int = 0) -> Path:
    """Render :func:`traffic_scene` as ``frame_%06d.ppm`` files plus ``truth.csv``."""
    out = Path(out_dir)
    frames, truth = traffic_scene(n_frames, size, seed)
    write_frames(out, frames)
    write_truth(out / "truth.csv", truth)
    return out
