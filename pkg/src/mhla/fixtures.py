"""Binary fixture files holding named float64 matrices.

Layout (little-endian): magic ``MHLA``, u32 version (1), u32 entry count,
then per entry u16 name length, UTF-8 name, u32 rows, u32 cols and
rows * cols float64 values in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FixtureError, FixtureMagicError, FixtureTruncatedError, FixtureVersionError
from .partition import CoefficientMatrix

MAGIC = b"MHLA"
VERSION = 1


def encode_fixture(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, m in tensors.items():
        m = np.asarray(m, dtype="<f8")
        if m.ndim != 2:
            raise ValueError(f"fixture entry {name!r} must be 2-D, got shape {m.shape}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m).tobytes())
    return b"".join(parts)


def decode_fixture(buf: bytes) -> dict:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FixtureTruncatedError(f"fixture truncated at byte {pos} (wanted {n} more, have {len(buf) - pos})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FixtureMagicError("not a fixture file: bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FixtureVersionError(f"fixture version {version} is not supported (expected {VERSION})")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(8 * rows * cols), dtype="<f8")
        out[name] = data.astype(np.float64).reshape(rows, cols)
    if pos != len(buf):
        raise FixtureError(f"{len(buf) - pos} trailing bytes after the last entry")
    return out


def save_fixture(path, tensors: dict) -> None:
    data = encode_fixture(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_fixture(path) -> dict:
    with open(path, "rb") as fh:
        return decode_fixture(fh.read())


def coefficients_to_tensors(c: CoefficientMatrix, prefix: str = "coefficients") -> dict:
    return {prefix: c.values, f"{prefix}/causal": np.array([[float(c.causal)]])}


def coefficients_from_tensors(tensors: dict, prefix: str = "coefficients") -> CoefficientMatrix:
    return CoefficientMatrix(tensors[prefix], bool(tensors[f"{prefix}/causal"][0, 0]))
