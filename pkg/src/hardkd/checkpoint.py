"""Binary checkpoints for model and augmentor parameters.

Little-endian layout:
  magic "HARDCKPT" | u32 version | u32 len + utf-8 descriptor | u32 count
  then per tensor: u32 len + utf-8 name | u32 rank | u32 extents... | f64 raw
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HARDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_str(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def save_checkpoint(path, descriptor, named_arrays):
    """Write named parameter arrays as 64-bit floats under a descriptor."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_str(f, descriptor)
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.tobytes())


def load_checkpoint(path, expected_descriptor=None):
    """Read a checkpoint; returns (descriptor, dict of float64 arrays)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        descriptor = _read_str(f)
        if expected_descriptor is not None and descriptor != expected_descriptor:
            raise CheckpointError(
                f"architecture mismatch: checkpoint is {descriptor!r}, "
                f"expected {expected_descriptor!r}"
            )
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(count):
            name = _read_str(f)
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if rank else 8
            arrays[name] = np.frombuffer(
                _read_exact(f, nbytes), dtype="<f8"
            ).reshape(shape).copy()
        return descriptor, arrays
