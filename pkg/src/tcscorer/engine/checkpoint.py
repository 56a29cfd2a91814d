"""Binary checkpoint format.

Layout, all integers little-endian uint32:

    magic b"ACGN" | version | tensor_count
    per tensor: name_len | name utf-8 | rank | dims... | payload

Payloads are raw little-endian float32 in row-major order, except for the
optional metadata entry named ``__config__`` whose payload is a UTF-8 JSON
document and whose single dim is the byte length. When present it is
written first.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"ACGN"
VERSION = 1
CONFIG_ENTRY = "__config__"


def _write_u32(fh, value):
    fh.write(struct.pack("<I", value))


def _read_u32(fh):
    raw = fh.read(4)
    if len(raw) != 4:
        raise CheckpointFormatError("checkpoint truncated")
    return struct.unpack("<I", raw)[0]


def _write_entry(fh, name, rank, dims, payload):
    encoded = name.encode("utf-8")
    _write_u32(fh, len(encoded))
    fh.write(encoded)
    _write_u32(fh, rank)
    for d in dims:
        _write_u32(fh, d)
    fh.write(payload)


def save_checkpoint(path, store, metadata=None):
    """Serialize a ParamStore (plus optional JSON metadata) atomically."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_u32(buf, VERSION)
    names = sorted(store.names())
    count = len(names) + (1 if metadata is not None else 0)
    _write_u32(buf, count)
    if metadata is not None:
        payload = json.dumps(metadata, sort_keys=True).encode("utf-8")
        _write_entry(buf, CONFIG_ENTRY, 1, [len(payload)], payload)
    for name in names:
        data = np.ascontiguousarray(store[name].data, dtype="<f4")
        _write_entry(buf, name, data.ndim, data.shape, data.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> float32 array, metadata or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic")
        version = _read_u32(fh)
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        count = _read_u32(fh)
        arrays = {}
        metadata = None
        for _ in range(count):
            name_len = _read_u32(fh)
            name = fh.read(name_len).decode("utf-8")
            rank = _read_u32(fh)
            dims = [_read_u32(fh) for _ in range(rank)]
            if name == CONFIG_ENTRY:
                raw = fh.read(dims[0])
                if len(raw) != dims[0]:
                    raise CheckpointFormatError(f"{path}: truncated metadata")
                metadata = json.loads(raw.decode("utf-8"))
                continue
            n_items = 1
            for d in dims:
                n_items *= d
            raw = fh.read(4 * n_items)
            if len(raw) != 4 * n_items:
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes")
    return arrays, metadata
