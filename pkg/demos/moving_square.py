"""Background subtraction on the smallest possible video.

A bright square bounces over a dark textured background.  The running-average
background absorbs the texture within a few dozen frames, after which every
frame yields exactly one box that hugs the square.

    python3 demos/moving_square.py
"""

from splitinfer.extract import detect_objects
from splitinfer.synth import moving_square

frames, truth = moving_square(n_frames=100, size=64)
per_frame = {}
for det in detect_objects(frames):
    per_frame.setdefault(det.frame, []).append(det.box)

print("frame  boxes  detected                    truth")
for f in (1, 5, 10, 25, 50, 51, 75, 99):
    boxes = per_frame.get(f, [])
    shown = ", ".join(f"({b.x},{b.y},{b.w},{b.h})" for b in boxes) or "-"
    t = truth[f]
    print(f"{f:>5}  {len(boxes):>5}  {shown:<26}  ({t.x},{t.y},{t.w},{t.h})")

late = [len(per_frame.get(f, [])) for f in range(51, 100)]
print(f"\nframes 51..99 with exactly one box: {late.count(1)}/49")
