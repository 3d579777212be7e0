#!/usr/bin/env python3
"""Writes the golden IDX fixture used by the data tests.

Ten 28x28 images of seeded pseudo-random bytes plus labels, and a JSON file of
per-image checksums computed here (independently of the C++ parser) on the
32x32 zero-padded, /255-scaled images:
  sum      = sum of pixel values
  weighted = sum of (flat index in the 32x32 canvas) * pixel value
"""
import json
import random
import struct
import sys
from pathlib import Path

out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures")
out.mkdir(parents=True, exist_ok=True)
rng = random.Random(20240611)
n, side, canvas = 10, 28, 32
images = [[rng.randrange(256) for _ in range(side * side)] for _ in range(n)]
labels = [rng.randrange(10) for _ in range(n)]

with open(out / "golden10-images.idx", "wb") as f:
    f.write(struct.pack(">IIII", 0x803, n, side, side))
    for img in images:
        f.write(bytes(img))
with open(out / "golden10-labels.idx", "wb") as f:
    f.write(struct.pack(">II", 0x801, n))
    f.write(bytes(labels))

off = (canvas - side) // 2
sums = []
for img in images:
    s = w = 0.0
    for r in range(side):
        for c in range(side):
            v = img[r * side + c] / 255.0
            s += v
            w += ((r + off) * canvas + (c + off)) * v
    sums.append({"sum": s, "weighted": w})
with open(out / "golden10-checksums.json", "w") as f:
    json.dump({"labels": labels, "images": sums}, f, indent=1)
