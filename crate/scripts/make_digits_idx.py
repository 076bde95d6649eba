"""Writes the 16x16 digits set used by the desk-scale tests as IDX files.

Source: scikit-learn's bundled 8x8 handwritten digits. Each image is
rescaled from 0..16 to 0..255 and upsampled 2x with bilinear interpolation.
Every third sample goes to the test split.
"""

import pathlib
import struct
import sys

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    path.write_bytes(header + array.tobytes())


def main(out):
    out = pathlib.Path(out)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = digits.images.astype(np.float64) * (255.0 / 16.0)
    images = np.stack([zoom(im, 2, order=1) for im in images])
    images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    test = np.arange(len(labels)) % 3 == 2
    write_idx(out / "train-images.idx", images[~test])
    write_idx(out / "train-labels.idx", labels[~test])
    write_idx(out / "test-images.idx", images[test])
    write_idx(out / "test-labels.idx", labels[test])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
