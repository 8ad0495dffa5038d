#!/usr/bin/env python3
"""Export the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: export_mnist_subset.py <mlxtend wheel> <output dir>

The wheel can be fetched with `pip download --no-deps mlxtend`. Rows are
written in the wheel's order (500 images per digit).
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main() -> None:
    wheel, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [list(map(int, line.split(","))) for line in gzip.decompress(raw).decode().splitlines()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        assert len(row) == 785
        pixels.extend(row[:784])
        labels.append(row[784])
    n = len(rows)
    with gzip.GzipFile(out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28) + bytes(pixels))
    with gzip.GzipFile(out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n) + bytes(labels))


if __name__ == "__main__":
    main()
