"""Regenerate the bundled grayscale PGM mini-set from scikit-image's sample
images (public-domain/CC0).  Large images are center-cropped to 256x256 to
keep the repository small and evaluation fast.  Run from the repo root:

    python3 tools/make_assets.py
"""

import os
import sys

import numpy as np
import skimage.data

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from densedenoise.data import GrayImage, write_pgm  # noqa: E402

NAMES = ["camera", "coins", "moon", "text", "page", "clock", "brick", "grass", "gravel", "cell"]
OUT = os.path.join(os.path.dirname(__file__), "..", "src", "densedenoise", "assets")


def center_crop(img, size=256):
    h, w = img.shape
    if h > size:
        top = (h - size) // 2
        img = img[top : top + size]
    if w > size:
        left = (w - size) // 2
        img = img[:, left : left + size]
    return img


def main():
    os.makedirs(OUT, exist_ok=True)
    for name in NAMES:
        img = getattr(skimage.data, name)()
        assert img.dtype == np.uint8 and img.ndim == 2, name
        img = center_crop(img)
        path = os.path.join(OUT, f"{name}.pgm")
        write_pgm(GrayImage(img), path)
        print(f"{path}: {img.shape[1]}x{img.shape[0]}")


if __name__ == "__main__":
    main()
