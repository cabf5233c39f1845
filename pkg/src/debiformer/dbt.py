"""Tensor archive file format.

A file is a sequence of records.  Each record is:

    8 bytes   magic "DBTENS01"
    4 bytes   little-endian uint32: header length n
    n bytes   JSON header {"dtype": "f32"|"f64", "shape": [...], "name": "..."}
    payload   raw little-endian values, row-major, prod(shape) elements

Archives hold many named records; names must be unique.  Headers are
serialized with sorted keys and no whitespace so identical contents give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Iterator, Mapping

import numpy as np

MAGIC = b"DBTENS01"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class FormatError(Exception):
    """Raised for malformed, truncated, or inconsistent archive files."""


def dtype_name(dt) -> str:
    dt = np.dtype(dt)
    if dt not in _NAMES:
        raise FormatError(f"unsupported dtype {dt}; only f32/f64 can be stored")
    return _NAMES[dt]


def write_record(fh: BinaryIO, name: str, arr: np.ndarray) -> int:
    arr = np.ascontiguousarray(arr)
    code = dtype_name(arr.dtype)
    header = json.dumps(
        {"dtype": code, "name": name, "shape": list(arr.shape)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    fh.write(payload)
    return len(MAGIC) + 4 + len(header) + len(payload)


def iter_records(fh: BinaryIO) -> Iterator[tuple[str, np.ndarray]]:
    while True:
        magic = fh.read(len(MAGIC))
        if not magic:
            return
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError("truncated record: missing header length")
        (hlen,) = struct.unpack("<I", raw_len)
        raw_header = fh.read(hlen)
        if len(raw_header) != hlen:
            raise FormatError("truncated record: incomplete header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"invalid record header: {e}") from e
        if not isinstance(header, dict) or "dtype" not in header or "shape" not in header:
            raise FormatError("record header must carry 'dtype' and 'shape'")
        code = header["dtype"]
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r}")
        shape = header["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and s >= 0 for s in shape
        ):
            raise FormatError(f"invalid shape {shape!r}")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read(count * dt.itemsize)
        if len(payload) != count * dt.itemsize:
            raise FormatError("truncated record: incomplete payload")
        arr = np.frombuffer(payload, dtype=dt).reshape(shape)
        arr = arr.astype(arr.dtype.newbyteorder("="))
        yield str(header.get("name", "")), arr


def save_archive(path: str, tensors: Mapping[str, np.ndarray]) -> int:
    """Write named arrays in iteration order; returns bytes written."""
    total = 0
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            total += write_record(fh, name, arr)
    return total


def load_archive(path: str) -> dict[str, np.ndarray]:
    """Read all records; duplicate names are a format error."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name, arr in iter_records(fh):
            if name in out:
                raise FormatError(f"duplicate record name {name!r}")
            out[name] = arr
    return out
