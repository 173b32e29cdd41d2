#!/usr/bin/env python3
"""Write Fashion-MNIST IDX files from the per-class JSON dumps shipped in the
`fashion-mnist` npm package (package/src/clothes/<label>.json).

Each class contributes its first 6000 images to the training split and the
next 1000 to the test split; records are interleaved with a fixed seed.
Empty records in the dump are skipped.
"""
import argparse
import json
import random
import struct
from pathlib import Path

TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def write_idx(out_dir, prefix, records):
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(records), 28, 28))
        for pixels, _ in records:
            f.write(bytes(pixels))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(records)))
        f.write(bytes(label for _, label in records))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("clothes_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    train, test = [], []
    for label in range(10):
        rows = json.loads((args.clothes_dir / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 28 * 28]
        if len(rows) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            raise SystemExit(f"class {label}: only {len(rows)} images")
        train += [(r, label) for r in rows[:TRAIN_PER_CLASS]]
        test += [(r, label) for r in rows[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]]

    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir, "train", train)
    write_idx(args.out_dir, "t10k", test)


if __name__ == "__main__":
    main()
