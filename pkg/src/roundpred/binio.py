"""Versioned binary container used for datasets, anchor sets and checkpoints.

Layout: 4-byte magic, u32 version, u64 header length, JSON header (utf-8,
canonical key order), then the raw little-endian buffers of each array in
the order declared by the header's ``arrays`` list.  Writing the same
content twice produces identical bytes, so artifact hashes are stable.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPES = {"f8": "<f8", "i8": "<i8"}


class FormatError(Exception):
    """Raised when a container file is truncated, corrupt or mismatched."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_blob(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    order = sorted(arrays)
    decl = []
    for name in order:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            code = "f8"
        elif arr.dtype.kind in "iub":
            code = "i8"
        else:
            raise ValueError(f"unsupported dtype for array {name!r}: {arr.dtype}")
        decl.append({"name": name, "dtype": code, "shape": list(arr.shape)})
    header = _canonical_json({"meta": meta, "arrays": decl})
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IQ", version, len(header)))
        f.write(header)
        for name, d in zip(order, decl):
            f.write(np.ascontiguousarray(arrays[name]).astype(_DTYPES[d["dtype"]]).tobytes())


def read_blob(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`write_blob`.

    Raises FormatError on wrong magic, wrong version or truncation.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated container (only {len(raw)} bytes)")
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    got_version, hlen = struct.unpack("<IQ", raw[4:16])
    if got_version != version:
        raise FormatError(f"{path}: version {got_version}, expected {version}")
    if len(raw) < 16 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for d in header["arrays"]:
        dtype = np.dtype(_DTYPES[d["dtype"]])
        count = int(np.prod(d["shape"], dtype=np.int64)) if d["shape"] else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated array {d['name']!r}")
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(d["shape"])
        arrays[d["name"]] = arr.copy()  # writable, native-owned
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header["meta"], arrays
