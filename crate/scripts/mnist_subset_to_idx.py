"""Convert the 5000-image MNIST subset shipped inside the mlxtend wheel into IDX files.

Usage: python3 scripts/mnist_subset_to_idx.py <mlxtend wheel> <output dir>

Writes a stratified split (400 train / 100 test per digit) in the standard
IDX layout so the Rust loader reads it exactly like the full MNIST release.
"""
import gzip
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, arr, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for dim in arr.shape:
            f.write(struct.pack(">I", dim))
        f.write(arr.astype(np.uint8).tobytes())


def main(wheel, out):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    data = np.array([[int(float(v)) for v in r.split(",")] for r in rows])
    pixels, labels = data[:, :784], data[:, 784]
    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:500])
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.array(idx))
        write_idx(f"{out}/{name}-images-idx3-ubyte", pixels[idx].reshape(-1, 28, 28), 0x803)
        write_idx(f"{out}/{name}-labels-idx1-ubyte", labels[idx], 0x801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
