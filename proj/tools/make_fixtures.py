#!/usr/bin/env python3
"""Writes the golden wire-format fixtures used by the unit tests.

Built with struct/zlib only, independently of the C++ codecs.
"""
import struct
import sys
import zlib
from pathlib import Path


def seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def f64s(values):
    return struct.pack("<%dd" % len(values), *values)


def upload():
    payload = [0.5, -1.0, 2.0, 3.25, 0.0, -0.125]
    body = b"FMPU" + struct.pack("<HIIIQ", 1, 7, 2, 3, 0x0102030405060708) + f64s(payload)
    return seal(body)


def sample_upload():
    draws = [[0.5 * (i + 1) for i in range(7)], [-0.25 * (i + 1) for i in range(7)]]
    cov = [1e-6, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    body = b"FMPS" + struct.pack("<HIIIIIBQ", 1, 3, 2, 2, 1, 2, 1, 42)
    for d in draws:
        body += f64s(d)
    body += f64s(cov)
    return seal(body)


def checkpoint():
    sections = [("a", 1, 2, [1.0, 2.0]), ("bb", 2, 1, [-1.0, 0.5])]
    table_size = 4 + 2 + 4 + sum(2 + len(n) + 16 for n, *_ in sections)
    table, records, offset = b"", b"", table_size
    for name, rows, cols, data in sections:
        rec = struct.pack("<H", len(name)) + name.encode() + struct.pack("<II", rows, cols) + f64s(data)
        table += struct.pack("<H", len(name)) + name.encode() + struct.pack("<IIQ", rows, cols, offset)
        records += rec
        offset += len(rec)
    return seal(b"FMPC" + struct.pack("<HI", 1, len(sections)) + table + records)


def feature_file():
    feats = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    body = b"FMPF" + struct.pack("<HQII", 1, 3, 2, 2) + f64s(feats) + struct.pack("<3H", 0, 1, 1)
    return seal(body)


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures")
    out.mkdir(parents=True, exist_ok=True)
    for name, data in [("upload.fmpu", upload()), ("samples.fmps", sample_upload()),
                       ("checkpoint.fmpc", checkpoint()), ("features.fmpf", feature_file())]:
        (out / name).write_bytes(data)
        print(name, len(data), "bytes")
