"""Regenerates the CLAHE reference rasters with OpenCV.

The input is a deterministic two-region texture; see `two_region` in
tests/fundus_data.rs for the same formula.
"""
import cv2
import numpy as np


def two_region(w, h):
    img = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            base = 50 if x < w // 2 else 160
            img[y, x] = base + (x * 7 + y * 13) % 23 * 2 + (x * y) % 11 + (3 if (x // 4 + y // 4) % 2 else 0)
    return img


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


for w, h in [(64, 64), (61, 50)]:
    src = two_region(w, h)
    out = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(8, 8)).apply(src)
    write_pgm(f"clahe_{w}x{h}_in.pgm", src)
    write_pgm(f"clahe_{w}x{h}_out.pgm", out)
