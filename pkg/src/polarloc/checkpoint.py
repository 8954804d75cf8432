"""Binary checkpoint format for named parameter arrays.

Layout (all integers little-endian):
    magic   4 bytes  b"PLOC"
    version u32      currently 1
    count   u32      number of named arrays
per array:
    name_len u32, name UTF-8 bytes
    rank     u32, extents rank x u64
    data     float32 little-endian, row-major

Values are stored as float32; a save/load round trip of float32 arrays
is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PLOC"
VERSION = 1


def save_arrays(path, named_arrays):
    """Write an ordered mapping of name -> ndarray."""
    items = list(named_arrays.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_arrays(path):
    """Read back a checkpoint as an ordered dict of float32 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PLOC checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = arr.copy()
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out
