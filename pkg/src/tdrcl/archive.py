"""Small versioned binary container: JSON header followed by raw array bytes.

Layout::

    magic (8 bytes) | header length (uint64 LE) | header JSON (utf-8) | array blobs

The header lists each array's name, dtype, shape and byte offset.  Output is a
pure function of the inputs (no timestamps), so rewriting identical content
produces identical bytes, unlike ``np.savez``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


def write_archive(path, magic: bytes, header: dict, arrays: dict) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind not in "biuf":
            raise ArchiveError(f"array {name!r} has unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    full = {"format_version": FORMAT_VERSION, "meta": header, "arrays": entries}
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_archive(path, magic: bytes) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ArchiveError(f"{path}: truncated archive ({len(data)} bytes)")
    if data[:8] != magic:
        raise ArchiveError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        full = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise ArchiveError(f"{path}: corrupt header") from None
    if full.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported format version {full.get('format_version')}")
    base = 16 + hlen
    arrays = {}
    for ent in full["arrays"]:
        start = base + ent["offset"]
        buf = data[start:start + ent["nbytes"]]
        if len(buf) != ent["nbytes"]:
            raise ArchiveError(f"{path}: array {ent['name']!r} is truncated")
        arrays[ent["name"]] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return full["meta"], arrays
