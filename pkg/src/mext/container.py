"""MEXT1 binary container for named tensors.

Layout::

    b"MEXT1" | uint32 LE header length | UTF-8 JSON header | raw tensor bytes

The header is ``{"meta": {...}, "tensors": [{name, ownership, shape, dtype,
byte_offset}, ...]}``. Offsets count from the first byte after the header and
tensors are stored little-endian, C order, in header order. JSON is written
with sorted keys and no whitespace so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch

MAGIC = b"MEXT1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i8": np.dtype("<i1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_NAMES = {v: k for k, v in _DTYPES.items()}


def dtype_name(dt) -> str:
    dt = np.dtype(dt).newbyteorder("<")
    try:
        return _NAMES[dt]
    except KeyError:
        raise ValueError(f"unsupported tensor dtype {dt}") from None


def write(path, entries, meta: dict | None = None) -> None:
    """``entries`` is an iterable of (name, ownership, ndarray)."""
    records, blobs = [], []
    offset = 0
    for name, owner, arr in entries:
        arr = np.asarray(arr)
        dn = dtype_name(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dn]).tobytes()
        records.append({
            "name": name,
            "ownership": owner,
            "shape": list(arr.shape),
            "dtype": dn,
            "byte_offset": offset,
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": records}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read(path) -> tuple[dict, list[dict], dict[str, np.ndarray]]:
    """Return (meta, tensor records, {name: array})."""
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointMismatch(f"{path}: not a MEXT1 container")
    if len(buf) < 9:
        raise CheckpointMismatch(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", buf[5:9])
    try:
        header = json.loads(buf[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"{path}: unreadable header") from exc
    base = 9 + hlen
    arrays = {}
    for rec in header["tensors"]:
        dt = _DTYPES[rec["dtype"]]
        n = int(np.prod(rec["shape"], dtype=np.int64))
        start = base + rec["byte_offset"]
        end = start + n * dt.itemsize
        if end > len(buf):
            raise CheckpointMismatch(f"{path}: tensor {rec['name']!r} runs past end of file")
        arrays[rec["name"]] = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(rec["shape"]).astype(dt.newbyteorder("="))
    return header.get("meta", {}), header["tensors"], arrays
