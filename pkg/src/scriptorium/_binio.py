"""Byte-level helpers for the versioned binary checkpoint files.

Layout shared by both checkpoint kinds (all integers little-endian):

    magic        7 bytes ("FPTHD-O" for OCR models, "FPTHD-L" for layout)
    version      u16
    ...format-specific tables...
    param table  u32 count, then per entry: u16 name length + UTF-8 name,
                 u8 ndim, ndim x u32 dims
    weights      float32 LE, C-order, concatenated in table order
    state        optional trailing u32 length + UTF-8 JSON (training state)
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np


def write_u8(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<B", v))


def write_u16(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<H", v))


def write_u32(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<I", v))


def read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def read_u8(f: BinaryIO) -> int:
    return struct.unpack("<B", read_exact(f, 1))[0]


def read_u16(f: BinaryIO) -> int:
    return struct.unpack("<H", read_exact(f, 2))[0]


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(f, 4))[0]


def write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for checkpoint")
    write_u16(f, len(raw))
    f.write(raw)


def read_str(f: BinaryIO) -> str:
    n = read_u16(f)
    return read_exact(f, n).decode("utf-8")


def write_json_chunk(f: BinaryIO, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_json_chunk(f: BinaryIO):
    n = read_u32(f)
    return json.loads(read_exact(f, n).decode("utf-8"))


def read_optional_json(f: BinaryIO):
    head = f.read(4)
    if len(head) < 4:
        return None
    n = struct.unpack("<I", head)[0]
    return json.loads(read_exact(f, n).decode("utf-8"))


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"bad checkpoint magic {got!r}, expected {magic!r}")


def write_params(f: BinaryIO, params: dict[str, np.ndarray]) -> None:
    names = sorted(params)
    write_u32(f, len(names))
    for name in names:
        arr = params[name]
        write_str(f, name)
        write_u8(f, arr.ndim)
        for d in arr.shape:
            write_u32(f, d)
    for name in names:
        f.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def read_params(f: BinaryIO, dtype=np.float32) -> dict[str, np.ndarray]:
    count = read_u32(f)
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        name = read_str(f)
        ndim = read_u8(f)
        dims = tuple(read_u32(f) for _ in range(ndim))
        shapes.append((name, dims))
    params: dict[str, np.ndarray] = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        raw = read_exact(f, 4 * n)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        params[name] = arr.astype(dtype)
    return params
