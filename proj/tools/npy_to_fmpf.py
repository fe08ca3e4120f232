#!/usr/bin/env python3
"""Converts a features .npy (N x d float) plus a labels .npy (N ints) into an FMPF file."""
import argparse
import struct
import zlib

import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("features")
    ap.add_argument("labels")
    ap.add_argument("out")
    ap.add_argument("--classes", type=int, default=None, help="class count (default: max label + 1)")
    args = ap.parse_args()

    x = np.ascontiguousarray(np.load(args.features), dtype="<f8")
    y = np.load(args.labels).astype(np.int64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise SystemExit("features must be N x d and match the label count")
    classes = args.classes if args.classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= classes or classes > 0xFFFF:
        raise SystemExit("labels out of range")
    body = b"FMPF" + struct.pack("<HQII", 1, x.shape[0], x.shape[1], classes)
    body += x.tobytes() + y.astype("<u2").tobytes()
    with open(args.out, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


if __name__ == "__main__":
    main()
