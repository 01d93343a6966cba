#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: scripts/mnist_from_npm.py <path-to-npm-package> <output-dir>

The package stores each class as a flat JSON array of 28x28 grayscale values in
[0, 1]. Samples are interleaved round-robin across classes so that any prefix of
the output is roughly class balanced.
"""
import gzip
import json
import os
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    per_class = []
    for d in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as f:
            raw = json.load(f)["data"]
        n = len(raw) // 784
        per_class.append([raw[i * 784:(i + 1) * 784] for i in range(n)])

    images, labels = [], []
    for i in range(max(len(c) for c in per_class)):
        for d, samples in enumerate(per_class):
            if i < len(samples):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in samples[i]))
                labels.append(d)

    os.makedirs(out, exist_ok=True)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} samples to {out}")


if __name__ == "__main__":
    main()
