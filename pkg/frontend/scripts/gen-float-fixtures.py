#!/usr/bin/env python3
"""Regenerate test/fixtures/floats.txt: `<ieee754-bits-hex> <repr>` pairs
covering named edge cases, raw random bit patterns, and log-uniform
magnitudes. The TypeScript formatter must reproduce the second column from
the first exactly."""

import math
import random
import struct
from pathlib import Path

rng = random.Random(20260814)

cases = [
    0.0, -0.0, 1.0, -1.0, 2.0, 0.5, 1.5, 0.1, 0.2, 0.3, 1 / 3, 2 / 3,
    1e15, -1e15, 1e16, -1e16, 9999999999999998.0, 99999999999999984.0,
    1e-4, 1e-5, -1e-4, -1e-5, 1e21, 1e-7, 123456.789, 3.141592653589793,
    5e-324, -5e-324, 1.7976931348623157e308, 2.2250738585072014e-308,
    1e100, 1e-100, 6.02e23, -2.5e-10, 1234567890123456.7,
]

out = list(cases)
for _ in range(2500):
    bits = rng.getrandbits(64)
    x = struct.unpack("<d", struct.pack("<Q", bits))[0]
    if math.isnan(x) or math.isinf(x):
        continue
    out.append(x)
for _ in range(1000):
    out.append(rng.uniform(-1e6, 1e6))
for _ in range(1000):
    x = rng.uniform(1, 10) * (10.0 ** rng.randint(-320, 308))
    if math.isfinite(x) and x != 0:
        out.append(x if rng.random() < 0.5 else -x)

path = Path(__file__).resolve().parent.parent / "test" / "fixtures" / "floats.txt"
with open(path, "w") as fh:
    for x in out:
        bits = struct.unpack("<Q", struct.pack("<d", x))[0]
        fh.write(f"{bits:016x} {x!r}\n")
print(f"{len(out)} fixtures -> {path}")
