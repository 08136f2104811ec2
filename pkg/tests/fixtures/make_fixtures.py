"""Regenerate the PGM fixtures from images bundled with scikit-image.

Run once; the resulting files are committed so the test suite does not need
scikit-image.
"""

from pathlib import Path

import numpy as np
import skimage.data as data
from skimage.color import rgb2gray

from comrec.pgm import write_pgm

HERE = Path(__file__).parent

# (source, top, left, size)
TRAIN = [
    ("camera", 60, 180, 180),
    ("moon", 200, 150, 180),
    ("coins", 60, 100, 180),
    ("astronaut", 40, 150, 180),
    ("coffee", 120, 200, 180),
    ("chelsea", 60, 120, 180),
    ("rocket", 150, 250, 180),
    ("immunohistochemistry", 200, 200, 180),
    ("hubble_deep_field", 300, 400, 180),
    ("page", 5, 100, 180),
]
HELDOUT = [
    ("clock", 90, 150, 128),
    ("text", 30, 150, 128),
    ("brick", 100, 100, 128),
    ("cell", 320, 330, 128),
    ("retina", 560, 170, 128),
]


def gray(name):
    img = getattr(data, name)()
    if img.ndim == 3:
        img = np.round(rgb2gray(img[..., :3]) * 255.0)
    return img.astype(np.uint8)


def main():
    for sub, spec in (("train", TRAIN), ("heldout", HELDOUT)):
        for i, (name, top, left, size) in enumerate(spec):
            crop = gray(name)[top:top + size, left:left + size]
            assert crop.shape == (size, size), (name, crop.shape)
            write_pgm(HERE / sub / f"{i:02d}_{name}.pgm", crop)


if __name__ == "__main__":
    main()
