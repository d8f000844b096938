#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into
gzipped IDX files (train/test split, deterministic shuffle).

usage: digits_to_idx.py <package/src/digits dir> <out dir> [n_train]
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, dims, payload):
    header = bytes([0, 0, 0x08, len(dims)]) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 6000
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(flat) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            samples.append((px, digit))
    random.Random(20200101).shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:n_train]), ("test", samples[n_train:])):
        write_idx(out / f"digits-{name}-images.idx.gz", [len(part), 28, 28], b"".join(p for p, _ in part))
        write_idx(out / f"digits-{name}-labels.idx.gz", [len(part)], bytes(l for _, l in part))
        print(name, len(part))


if __name__ == "__main__":
    main()
