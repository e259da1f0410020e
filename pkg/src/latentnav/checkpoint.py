"""Binary checkpoint container.

Layout (all integers little-endian):
  magic   4 bytes  b"RNRK"
  version u32      currently 1
  records, repeated until EOF:
    name_len u32, name (UTF-8), rank u32, extents rank*u64, payload f64 LE C-order

Round-trips are bit-exact; record order is sorted by name so identical content
always produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RNRK"
VERSION = 1


class BadMagic(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass


def save_arrays(path, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")  # tobytes() emits C order
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise BadMagic(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise UnsupportedVersion(f"checkpoint version {version}, expected {VERSION}")
        out = {}
        while True:
            head = f.read(4)
            if not head:
                return out
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
