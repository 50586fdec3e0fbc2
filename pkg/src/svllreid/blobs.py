"""Binary tensor blobs: name, rank, extents and little-endian float32 data."""
import struct

import numpy as np


class TruncatedError(EOFError):
    pass


def write_blob(fh, name, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_blob(fh):
    (n,) = struct.unpack("<Q", _read(fh, 8))
    name = _read(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<Q", _read(fh, 8))
    shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)
