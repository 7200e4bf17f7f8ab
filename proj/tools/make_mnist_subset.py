#!/usr/bin/env python3
"""Write a shuffled MNIST subset as standard IDX files.

The sandbox has no route to the MNIST mirrors, so the source is the 5000-image
MNIST sample shipped inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz,
one row per image: 784 pixel values followed by the label).

    pip download --no-deps -d /tmp/mlx mlxtend
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist_subset
"""
import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)

    # The source is sorted by class; shuffle before splitting.
    order = np.random.default_rng(args.seed).permutation(len(labels))
    pixels, labels = pixels[order].reshape(-1, 28, 28), labels[order]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = args.n_train, args.n_test
    write_idx_images(out / "train-images-idx3-ubyte", pixels[:tr])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[:tr])
    write_idx_images(out / "t10k-images-idx3-ubyte", pixels[tr:tr + te])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[tr:tr + te])


if __name__ == "__main__":
    main()
