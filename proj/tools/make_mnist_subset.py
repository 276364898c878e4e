#!/usr/bin/env python3
"""Convert the 5,000-sample MNIST CSV bundled with mlxtend into IDX files.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out_dir>

Rows are shuffled with a fixed seed and split 4,000 train / 1,000 test.
Output names follow the original MNIST distribution.
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, magic, array):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    src, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    table = np.genfromtxt(gzip.open(src), delimiter=",").astype(np.int64)
    images, labels = table[:, :-1], table[:, -1]
    order = np.random.default_rng(20240607).permutation(len(labels))
    images = images[order].reshape(-1, 28, 28)
    labels = labels[order]
    write_idx(out / "train-images-idx3-ubyte", 0x00000803, images[:4000])
    write_idx(out / "train-labels-idx1-ubyte", 0x00000801, labels[:4000])
    write_idx(out / "t10k-images-idx3-ubyte", 0x00000803, images[4000:])
    write_idx(out / "t10k-labels-idx1-ubyte", 0x00000801, labels[4000:])


if __name__ == "__main__":
    main()
