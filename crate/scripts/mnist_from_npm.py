#!/usr/bin/env python3
"""Build MNIST-format IDX files from the digits bundled in the `mnist` npm package.

The sandbox used to develop this project has no route to the official MNIST
mirrors, but the npm package ships ~10k real MNIST digits as JSON.  This script
repacks them into the standard gzipped IDX layout so that the Rust IDX reader
is exercised on the same byte format as the official files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Per class, the first 80% of samples go to the `train-*` files and the rest to
the `t10k-*` files.  If you have the official MNIST files, drop them into the
same directory instead; the reader accepts both raw and gzipped IDX.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    train, test = [], []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(data) // 784
        cut = int(n * 0.8)
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784])
            (train if i < cut else test).append((px, label))

    dst.mkdir(parents=True, exist_ok=True)
    for prefix, items in (("train", train), ("t10k", test)):
        images = struct.pack(">IIII", 2051, len(items), 28, 28) + b"".join(p for p, _ in items)
        labels = struct.pack(">II", 2049, len(items)) + bytes(l for _, l in items)
        # mtime=0 keeps the archives byte-stable across regenerations
        with open(dst / f"{prefix}-images-idx3-ubyte.gz", "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(images)
        with open(dst / f"{prefix}-labels-idx1-ubyte.gz", "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(labels)
        print(f"{prefix}: {len(items)} digits")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
