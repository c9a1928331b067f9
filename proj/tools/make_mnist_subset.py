#!/usr/bin/env python3
"""Write the 5000-digit MNIST subset shipped inside the mlxtend wheel as IDX files.

The subset has 500 digits per class. Rows are shuffled with a fixed seed so
that any prefix is roughly class-balanced. The first 50 rows are also written
as a small fixture for the CLI smoke tests.

    pip download --no-deps -d /tmp/pk mlxtend
    python3 tools/make_mnist_subset.py /tmp/pk/mlxtend-*.whl data/mnist5k tests/fixtures
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, images, labels):
    n, rows, cols = images.shape
    with open(path + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(path + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel, out_dir, fixture_dir = sys.argv[1:4]
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28)
    labels = table[:, 784]
    order = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    write_idx(f"{out_dir}/mnist5k", images, labels)
    write_idx(f"{fixture_dir}/mnist50", images[:50], labels[:50])


if __name__ == "__main__":
    main()
