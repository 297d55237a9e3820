"""TNSR tensor fixture files.

Layout (little-endian): ``b"TNSR"``, u32 version, u32 rank, rank x u32 dims,
then the payload. Version 1 stores float32 (fixture files); version 2
stores float64 and is used inside checkpoints where round-trips must be
bit-exact.
"""

import struct

import numpy as np

__all__ = ["FormatError", "pack_tensor", "unpack_tensor", "save_tensor", "load_tensor"]

MAGIC = b"TNSR"
_DTYPES = {1: "<f4", 2: "<f8"}


class FormatError(ValueError):
    """Malformed binary payload; ``offset`` is the byte position of the fault."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def pack_tensor(x, version=1):
    x = np.asarray(x, dtype=np.float64)
    if version not in _DTYPES:
        raise ValueError(f"unsupported TNSR version {version}")
    head = MAGIC + struct.pack("<II", version, x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return head + np.ascontiguousarray(x, dtype=_DTYPES[version]).tobytes()


def unpack_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    buf = memoryview(buf)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError("bad TNSR magic", offset)
    if len(buf) < offset + 12:
        raise FormatError("truncated TNSR header", len(buf))
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version not in _DTYPES:
        raise FormatError(f"unsupported TNSR version {version}", offset + 4)
    pos = offset + 12
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated TNSR dims", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = np.dtype(_DTYPES[version])
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated TNSR payload: need {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).astype(np.float64).reshape(dims)
    return arr, pos + nbytes


def save_tensor(path, x, version=1):
    with open(path, "wb") as fh:
        fh.write(pack_tensor(x, version))


def load_tensor(path):
    with open(path, "rb") as fh:
        arr, _ = unpack_tensor(fh.read())
    return arr
