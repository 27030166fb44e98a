"""C x H x W feature maps and the ``TIPFM`` binary file format.

Layout (little-endian)::

    b"TIPFM"  version:u32  C:u32  H:u32  W:u32
    C*H*W float32 values, channel-major (all of channel 0 first)

Token ``t`` of a map is the channel vector at cell ``(y, x)`` with
``t = y * W + x``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ShapeError

MAGIC = b"TIPFM"
VERSION = 1
_HEADER = struct.Struct("<5sIIII")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray

    def __post_init__(self):
        a = np.array(self.values, dtype=np.float64, copy=True)
        if a.ndim != 3:
            raise ShapeError(f"feature map must be C x H x W, got shape {a.shape}")
        if 0 in a.shape:
            raise ShapeError(f"feature map has an empty axis: {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("feature map contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def tokens(self) -> np.ndarray:
        """(H*W, C) matrix, one row per spatial cell in row-major order."""
        c, h, w = self.values.shape
        return self.values.reshape(c, h * w).T.copy()

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, height: int, width: int) -> "FeatureMap":
        t = np.asarray(tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != height * width:
            raise ShapeError(f"{t.shape} tokens cannot fill a {height}x{width} grid")
        return cls(t.T.reshape(t.shape[1], height, width))

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


def write_feature_map(fm: FeatureMap, path) -> None:
    c, h, w = fm.shape
    payload = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, c, h, w))
        fh.write(payload)


def read_feature_map(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * c * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {c}x{h}x{w}, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    return FeatureMap(values.astype(np.float64))
