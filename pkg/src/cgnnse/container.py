"""Versioned binary container shared by dataset and checkpoint files.

Byte layout::

    offset 0   8 bytes   magic (e.g. b"CGNNDS01")
    offset 8   8 bytes   header length H, unsigned little-endian
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          raw blocks, little-endian float64 / uint8, back to back

The header lists each block as ``{"name", "dtype", "shape", "offset", "nbytes"}``
with offsets relative to the start of the block area, plus a ``sha256`` of
the whole block area and any caller metadata under ``"meta"``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"f8": "<f8", "u1": "|u1", "i8": "<i8"}


class ContainerError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)


class IntegrityError(ContainerError):
    pass


def write_container(path, magic, meta, blocks):
    entries, chunks, pos = [], [], 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        key = {"f": "f8", "u": "u1", "b": "u1", "i": "i8"}[arr.dtype.kind]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": pos, "nbytes": len(raw)})
        chunks.append(raw)
        pos += len(raw)
    payload = b"".join(chunks)
    header = {"meta": meta, "blocks": entries, "sha256": hashlib.sha256(payload).hexdigest()}
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(magic + struct.pack("<Q", len(head)) + head + payload)


def read_container(path, magic):
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ContainerError("file shorter than the fixed preamble", len(data))
    if data[:8] != magic:
        raise ContainerError(f"bad magic {data[:8]!r}, expected {magic!r}", 0)
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise ContainerError("header runs past end of file", len(data))
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise ContainerError(f"header is not valid JSON: {exc}", 16) from None
    base = 16 + hlen
    payload = data[base:]
    blocks = {}
    for e in header["blocks"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ContainerError(f"block {e['name']!r} truncated", base + len(payload))
        arr = np.frombuffer(payload[e["offset"]:end], dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        blocks[e["name"]] = arr.copy()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise IntegrityError("checksum mismatch in block area", base)
    return header["meta"], blocks
