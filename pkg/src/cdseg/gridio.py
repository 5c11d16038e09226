"""On-disk format for 3D grids.

A grid file is a small self-describing binary blob: magic, dtype tag,
dims, spacing, then the raw voxel data little-endian in C order.  Volumes
and distance maps are stored as float32, masks as uint8.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VXG1"
_HEADER = struct.Struct("<4sB3I3d")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("uint8")}


def write_grid(path, array, spacing=(1.0, 1.0, 1.0)):
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"expected a 3D grid, got shape {array.shape}")
    if array.dtype == np.uint8 or array.dtype == np.bool_:
        tag, data = 1, np.ascontiguousarray(array, dtype=np.uint8)
    else:
        tag, data = 0, np.ascontiguousarray(array, dtype="<f4")
    header = _HEADER.pack(MAGIC, tag, *array.shape, *(float(s) for s in spacing))
    Path(path).write_bytes(header + data.tobytes())


def read_grid(path):
    """Returns (array, spacing)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid file")
    magic, tag, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if tag not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    expected = _HEADER.size + nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    array = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(nx, ny, nz)
    return array.copy(), (sx, sy, sz)


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
