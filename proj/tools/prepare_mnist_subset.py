#!/usr/bin/env python3
"""Convert the digit corpus shipped by the `mnist` npm package into IDX files.

The npm package (https://www.npmjs.com/package/mnist) bundles 10000 MNIST
digits as JSON arrays of intensities in [0, 1] with three-decimal precision.
Each value maps back to its original byte via round(v * 255).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/prepare_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path

ROWS = COLS = 28


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-size", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20210622)
    args = ap.parse_args()

    samples = []
    for label in range(10):
        data = json.loads((args.digits_dir / f"{label}.json").read_text())["data"]
        n = len(data) // (ROWS * COLS)
        for i in range(n):
            chunk = data[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            pixels = bytes(min(255, max(0, round(v * 255))) for v in chunk)
            samples.append((pixels, label))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test_size], samples[args.test_size:]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("t10k", test)):
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", 0x00000803,
                  (len(split), ROWS, COLS), b"".join(p for p, _ in split))
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", 0x00000801,
                  (len(split),), bytes(l for _, l in split))
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main()
