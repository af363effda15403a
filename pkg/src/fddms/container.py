"""Versioned binary container: magic, JSON header, then raw float64/int64 arrays.

Layout::

    8-byte magic | u16 version | u32 header length | header JSON (utf-8) | array bytes

The header lists each array's name, dtype and shape in payload order. Arrays
are stored row-major, little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dtype, copy=False).tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated header")
    got, version, hlen = _PREFIX.unpack_from(buf)
    if got != magic:
        raise ContainerError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    pos = _PREFIX.size
    header = json.loads(buf[pos: pos + hlen])
    pos += hlen
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(buf):
            raise ContainerError(f"{path}: array {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype, count, pos).reshape(e["shape"]).copy()
        pos += nbytes
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return header["meta"], arrays
