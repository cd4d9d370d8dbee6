"""Binary container: 8-byte magic, length-prefixed JSON header, raw arrays.

The header is UTF-8 JSON prefixed by a little-endian uint32 byte length. It
carries free-form ``meta`` plus an ``arrays`` index (name/shape/dtype, in
payload order). Arrays are written C-contiguous, little-endian, in index
order. Dataset files restrict dtypes to ``<f4``/``<i4``; checkpoints also
allow ``<f8``.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ChecksumError, FormatError

_LEN = struct.Struct("<I")


def write_container(path, magic: bytes, meta: dict, arrays, allowed_dtypes=("<f4", "<i4", "<f8")):
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    index = []
    blobs = []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr)
        dtype = a.dtype.newbyteorder("<").str
        if dtype not in allowed_dtypes:
            raise ValueError(f"array {name!r} has unsupported dtype {a.dtype}")
        index.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        blobs.append(a.astype(dtype, copy=False).tobytes(order="C"))
    header = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(_LEN.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path, magic: bytes):
    """Read back (meta, {name: array}). Raises FormatError on any damage."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated file ({len(data)} bytes)")
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    (hlen,) = _LEN.unpack(data[8:12])
    if len(data) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from e
    if not isinstance(header, dict) or "arrays" not in header or "meta" not in header:
        raise FormatError(f"{path}: header missing meta/arrays")
    offset = 12 + hlen
    out = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(dt.itemsize * np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for array {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(data[offset : offset + nbytes], dtype=dt).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header["meta"], out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checksum(path, expected: str):
    actual = sha256_file(path)
    if actual != expected:
        raise ChecksumError(f"{path}: checksum {actual} != manifest {expected}")
