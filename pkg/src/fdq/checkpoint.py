"""FDQ1 checkpoint files: named float32 tensors, bit-exact round trip.

Layout, all integers little-endian:

    magic   4 bytes  b"FDQ1"
    version u32      currently 1
    count   u64      number of manifest entries
    entry*  count times:
        name_len u64, name (UTF-8), rank u64, dims u64 * rank
    payload count times, manifest order: raw f32, C order

A manifest entry with name ``__type__/<tag>`` and dims [0] carries a
checkpoint type tag instead of data; loaders use it to pick the right
reconstructor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"FDQ1"
VERSION = 1
TYPE_PREFIX = "__type__/"


def save_tensors(path, named):
    """Write an ordered {name: float32 array} mapping to path."""
    items = list(named.items())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(items))
    payloads = []
    for name, arr in items:
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<Q", len(encoded))
        blob += encoded
        blob += struct.pack("<Q", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        payloads.append(arr)
    for arr in payloads:
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_tensors(path):
    """Read a checkpoint back into an ordered {name: float32 array} dict."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        piece = view[pos:pos + n]
        pos += n
        return piece

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not an FDQ1 checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8, "count"))
    shapes = []
    for k in range(count):
        (name_len,) = struct.unpack("<Q", take(8, f"entry {k} name length"))
        name = bytes(take(name_len, f"entry {k} name")).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, f"entry {k} rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"entry {k} dims"))
        shapes.append((name, dims))
    out = {}
    for name, dims in shapes:
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(take(4 * size, f"tensor {name}"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float32, copy=True)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def with_type_tag(named, tag):
    """Prepend a type-tag entry to a tensor mapping."""
    out = {TYPE_PREFIX + tag: np.zeros(0, dtype=np.float32)}
    out.update(named)
    return out


def split_type_tag(named):
    """Pull the type tag (or None) out of a loaded mapping."""
    tag = None
    rest = {}
    for name, arr in named.items():
        if name.startswith(TYPE_PREFIX):
            if tag is not None:
                raise CheckpointError("multiple type tags in one checkpoint")
            tag = name[len(TYPE_PREFIX):]
        else:
            rest[name] = arr
    return tag, rest
