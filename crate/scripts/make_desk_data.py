#!/usr/bin/env python3
"""Builds the reduced MNIST / Fashion-MNIST IDX files under data/desk/.

Source: the `mnist` (10,000 MNIST digits) and `fashion-mnist` (70,000
images) npm packages, unpacked with `npm pack mnist fashion-mnist`.

    python3 scripts/make_desk_data.py <mnist-pkg-dir> <fashion-mnist-pkg-dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "desk"


def load_mnist(pkg):
    per_class = []
    for k in range(10):
        flat = json.load(open(Path(pkg) / "src" / "digits" / f"{k}.json"))["data"]
        rows = [flat[i : i + 784] for i in range(0, len(flat), 784)]
        per_class.append([bytes(int(round(v * 255)) for v in r) for r in rows])
    return per_class


def load_fmnist(pkg):
    per_class = []
    for k in range(10):
        rows = json.load(open(Path(pkg) / "src" / "clothes" / f"{k}.json"))["data"]
        per_class.append([bytes(r) for r in rows])
    return per_class


def write_idx(stem, rows):
    rng = random.Random(0)
    rng.shuffle(rows)
    with gzip.GzipFile(OUT / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
        for img, _ in rows:
            f.write(img)
    with gzip.GzipFile(OUT / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(rows)))
        f.write(bytes(lbl for _, lbl in rows))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    mnist = load_mnist(sys.argv[1])
    train, test = [], []
    for k, rows in enumerate(mnist):
        cut = (len(rows) * 4) // 5
        train += [(r, k) for r in rows[:cut]]
        test += [(r, k) for r in rows[cut:]]
    write_idx("mnist-train", train)
    write_idx("mnist-test", test)

    fmnist = load_fmnist(sys.argv[2])
    train, test = [], []
    for k, rows in enumerate(fmnist):
        train += [(r, k) for r in rows[:800]]
        test += [(r, k) for r in rows[800:1000]]
    write_idx("fmnist-train", train)
    write_idx("fmnist-test", test)


if __name__ == "__main__":
    main()
