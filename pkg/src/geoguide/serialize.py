"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"GGT1"                      magic
    u32 count
    repeated count times:
        u32 name_len, name bytes (UTF-8)
        u32 ndim, ndim x u64 extents
        prod(extents) x f64 data, row-major
"""

import struct

import numpy as np

MAGIC = b"GGT1"


def save_tensors(path, named):
    """Write ``{name: array-like}`` to ``path`` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, value in named.items():
            arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``{name: ndarray}``."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * size)
            if len(buf) != 8 * size:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out
