#!/usr/bin/env python3
"""Convert the digit arrays shipped in the `mnist` npm package into gzipped IDX files.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/convert_npm_mnist.py package/src/digits data/mnist

The package stores each digit class as one flat JSON array of 28x28 grayscale
intensities in [0, 1]. Samples are interleaved with a fixed permutation so the
resulting file is not grouped by class, then quantized back to bytes.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(data) // (SIDE * SIDE)
        for i in range(count):
            pixels = data[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((digit, bytes(min(255, max(0, round(v * 255))) for v in pixels)))
    random.Random(20240611).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for _, px in samples:
            f.write(px)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for label, _ in samples))
    print(f"wrote {len(samples)} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
