"""Binary segmentation stacks: SSTK codec, class table, superclasses, shuffling.

SSTK layout (little-endian)::

    b"SSTK" | u32 version=1 | u32 n_cls | u32 H | u32 W | payload

The payload holds one bit per pixel, per class row-major, least
significant bit first, each class padded to a whole byte.
"""

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .projector import ConfigError
from .tensor_core.io import FormatError

__all__ = [
    "MaskStack",
    "ClassTable",
    "SuperclassMap",
    "Presence",
    "class_table",
    "default_superclass_map",
    "read_segstack",
    "write_segstack",
    "aggregate_superclasses",
    "class_permutation",
    "shuffle_classes",
    "presence",
]

MAGIC = b"SSTK"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def _class_bytes(H, W):
    return -(-(H * W) // 8)


@dataclass(frozen=True)
class MaskStack:
    n_cls: int
    H: int
    W: int
    bits: bytes

    def __post_init__(self):
        if len(self.bits) != self.n_cls * _class_bytes(self.H, self.W):
            raise ValueError(
                f"payload has {len(self.bits)} bytes, expected {self.n_cls * _class_bytes(self.H, self.W)}"
            )

    @classmethod
    def from_array(cls, masks):
        m = np.asarray(masks)
        if m.ndim != 3:
            raise ValueError(f"expected [n_cls, H, W] masks, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
        n, H, W = m.shape
        flat = m.reshape(n, H * W).astype(np.uint8)
        packed = np.packbits(flat, axis=1, bitorder="little")
        return cls(n, H, W, packed.tobytes())

    def to_array(self):
        """Decoded masks as a ``uint8`` array ``[n_cls, H, W]``."""
        nb = _class_bytes(self.H, self.W)
        raw = np.frombuffer(self.bits, dtype=np.uint8).reshape(self.n_cls, nb)
        flat = np.unpackbits(raw, axis=1, count=self.H * self.W, bitorder="little")
        return flat.reshape(self.n_cls, self.H, self.W)

    def areas(self):
        return self.to_array().reshape(self.n_cls, -1).sum(axis=1)


def write_segstack(stack):
    return _HEADER.pack(MAGIC, VERSION, stack.n_cls, stack.H, stack.W) + stack.bits


def read_segstack(data):
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad SSTK magic", 0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated SSTK header", len(data))
    _, version, n, H, W = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported SSTK version {version}", 4)
    need = n * _class_bytes(H, W)
    payload = data[_HEADER.size :]
    if len(payload) < need:
        raise FormatError(f"truncated SSTK payload: need {need} bytes, have {len(payload)}", len(data))
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after SSTK payload", _HEADER.size + need)
    return MaskStack(n, H, W, payload)


@lru_cache(maxsize=1)
def _class_data():
    with resources.files("segfusion.data").joinpath("classes.json").open(encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class ClassTable:
    names: tuple

    def __len__(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)


def class_table():
    """The 212 segmentation classes, in index order."""
    rows = sorted(_class_data()["classes"], key=lambda r: r["index"])
    return ClassTable(tuple(r["name"] for r in rows))


@dataclass(frozen=True)
class SuperclassMap:
    """Each class index mapped to exactly one named superclass."""

    names: tuple
    assignment: tuple  # superclass position for every class index

    def __post_init__(self):
        if any(not 0 <= a < len(self.names) for a in self.assignment):
            raise ConfigError("superclass assignment out of range")

    def members(self, superclass):
        k = self.names.index(superclass)
        return [i for i, a in enumerate(self.assignment) if a == k]

    def permuted(self, perm):
        """The map seen after reordering classes so that new class j is old ``perm[j]``."""
        return SuperclassMap(self.names, tuple(self.assignment[p] for p in perm))

    @classmethod
    def from_json(cls, obj):
        names = tuple(obj["superclasses"])
        pos = {n: k for k, n in enumerate(names)}
        rows = sorted(obj["classes"], key=lambda r: r["index"])
        if [r["index"] for r in rows] != list(range(len(rows))):
            raise ConfigError("class indices must be contiguous from 0")
        try:
            assignment = tuple(pos[r["superclass"]] for r in rows)
        except KeyError as e:
            raise ConfigError(f"unknown superclass {e.args[0]!r}") from None
        return cls(names, assignment)


def default_superclass_map():
    return SuperclassMap.from_json(_class_data())


def aggregate_superclasses(stack, mapping):
    """Boolean OR of member masks into one mask per superclass."""
    if stack.n_cls != len(mapping.assignment):
        raise ConfigError(f"stack has {stack.n_cls} classes, map covers {len(mapping.assignment)}")
    masks = stack.to_array()
    assign = np.asarray(mapping.assignment)
    out = np.zeros((len(mapping.names), stack.H, stack.W), dtype=np.uint8)
    for k in range(len(mapping.names)):
        sel = assign == k
        if sel.any():
            out[k] = masks[sel].any(axis=0)
    return MaskStack.from_array(out)


def class_permutation(n_cls, seed):
    return np.random.default_rng(seed).permutation(n_cls)


def shuffle_classes(stack, seed):
    """Reorder the class axis with a seeded ``numpy`` PCG64 permutation."""
    perm = class_permutation(stack.n_cls, seed)
    return MaskStack.from_array(stack.to_array()[perm])


@dataclass(frozen=True)
class Presence:
    present: bool
    area_fraction: float


def presence(stack, min_area_fraction=0.001):
    if not 0.0 <= min_area_fraction < 1.0:
        raise ValueError("min_area_fraction must lie in [0, 1)")
    frac = stack.areas() / float(stack.H * stack.W)
    return [Presence(bool(f >= min_area_fraction), float(f)) for f in frac]
