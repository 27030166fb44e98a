"""Exact Euclidean k-nearest-neighbour search over a descriptor database.

Descriptors are stored as float32. Distances are always reported in float64,
computed as ``sqrt(sum((x - q)**2))``. Equal distances are ordered by
ascending image id.

Large indexes are first screened with a float32 matrix-vector product. Any
row whose screened squared distance lies within twice the worst-case rounding
bound of the k-th smallest is then re-scored exactly, so the answer is the
same as a full float64 scan.

Index file layout (little-endian)::

    b"TIPIX"  version:u32  count:u64  dim:u32
    count x (len:u32, utf-8 id bytes)
    count*dim float32 values, row-major
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BuildError, FormatError, ShapeError

__all__ = [
    "Candidate",
    "DescriptorIndex",
    "RetrievalResult",
    "build_index",
    "knn",
    "knn_batch",
    "load_index",
    "read_descriptors",
    "save_index",
    "write_descriptors",
]

MAGIC = b"TIPIX"
VERSION = 1
_HEADER = struct.Struct("<5sIQI")
_LEN = struct.Struct("<I")
_U32 = 2.0**-24
# below this many stored values a plain float64 scan is cheaper than screening
_EXACT_SCAN_LIMIT = 1 << 21


class Candidate(NamedTuple):
    id: str
    distance: float


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    k: int
    candidates: tuple[Candidate, ...]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.candidates]

    def to_json(self) -> dict:
        return {
            "query": self.query_id,
            "k": self.k,
            "candidates": [{"id": c.id, "distance": c.distance} for c in self.candidates],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievalResult":
        cands = tuple(Candidate(str(c["id"]), float(c["distance"])) for c in obj["candidates"])
        return cls(str(obj["query"]), int(obj.get("k", len(cands))), cands)


class DescriptorIndex:
    """Immutable table of (id, float32 descriptor) rows."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise BuildError(f"descriptor table must be 2-D, got {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise BuildError(f"{len(ids)} ids for {vectors.shape[0]} descriptors")
        if not np.all(np.isfinite(vectors)):
            raise BuildError("descriptors contain non-finite values")
        self._ids = tuple(ids)
        seen: set[str] = set()
        for image_id in self._ids:
            if image_id in seen:
                raise BuildError(f"duplicate image id {image_id!r}")
            seen.add(image_id)
        vectors.setflags(write=False)
        self._vectors = vectors
        order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        self._id_rank = rank
        self._sq_norms = np.zeros(len(vectors))
        for start in range(0, len(vectors), 4096):
            rows = vectors[start:start + 4096].astype(np.float64)
            self._sq_norms[start:start + 4096] = np.einsum("ij,ij->i", rows, rows)
        self._max_norm = float(np.sqrt(self._sq_norms.max())) if len(vectors) else 0.0

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other):
        if not isinstance(other, DescriptorIndex):
            return NotImplemented
        return self._ids == other._ids and self._vectors.shape == other._vectors.shape and bool(
            np.array_equal(self._vectors, other._vectors)
        )

    def __repr__(self):
        return f"DescriptorIndex(size={len(self)}, dim={self.dim})"

    def vector(self, image_id: str) -> np.ndarray:
        return self._vectors[self._ids.index(image_id)]

    def _exact(self, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
        diff = self._vectors[rows].astype(np.float64) - q
        return np.sqrt(np.sum(diff * diff, axis=1))

    def _candidate_rows(self, q: np.ndarray, k: int, screen: bool | None) -> np.ndarray:
        n = len(self)
        if screen is None:
            screen = n * self.dim > _EXACT_SCAN_LIMIT
        if not screen or k >= n:
            return np.arange(n)
        q32 = q.astype(np.float32)
        approx = self._sq_norms - 2.0 * (self._vectors @ q32).astype(np.float64) + float(q @ q)
        q_norm = float(np.sqrt(q @ q))
        # screened squared distance is within 2 (dim + 2) u |x| |q| of the exact one
        bound = 2.0 * (self.dim + 2) * _U32 * self._max_norm * q_norm * 1.0001 + 1e-12 * (1.0 + float(q @ q))
        kth = np.partition(approx, k - 1)[k - 1]
        return np.flatnonzero(approx <= kth + 2.0 * bound)


def build_index(records) -> DescriptorIndex:
    """Index from an iterable of ``(image_id, descriptor)`` pairs."""
    records = list(records)
    if not records:
        return DescriptorIndex([], np.zeros((0, 0), dtype=np.float32))
    ids = [str(r[0]) for r in records]
    dims = {np.asarray(r[1]).shape for r in records}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise BuildError(f"descriptors must be 1-D with one common length, saw shapes {sorted(dims)}")
    return DescriptorIndex(ids, np.stack([np.asarray(r[1], dtype=np.float32) for r in records]))


def knn(index: DescriptorIndex, query, k: int, query_id: str = "", screen: bool | None = None) -> RetrievalResult:
    """The ``k`` nearest stored descriptors, saturating at the index size."""
    if k < 1:
        raise ShapeError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return RetrievalResult(query_id, k, ())
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ShapeError(f"query has shape {q.shape}, index dim is {index.dim}")
    rows = index._candidate_rows(q, k, screen)
    dist = index._exact(rows, q)
    order = np.lexsort((index._id_rank[rows], dist))[:k]
    cands = tuple(Candidate(index.ids[rows[i]], float(dist[i])) for i in order)
    return RetrievalResult(query_id, k, cands)


def knn_batch(index: DescriptorIndex, queries, k: int, query_ids=None, threads: int | None = None) -> list[RetrievalResult]:
    """Run ``knn`` per query, optionally across threads; output order follows input order."""
    queries = np.asarray(queries, dtype=np.float64)
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(queries))]
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(queries) <= 1:
        return [knn(index, q, k, qid) for q, qid in zip(queries, ids)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda pair: knn(index, pair[0], k, pair[1]), zip(queries, ids)))


def save_index(index: DescriptorIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(index), index.dim))
        for image_id in index.ids:
            raw = image_id.encode("utf-8")
            fh.write(_LEN.pack(len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    ids = []
    for n in range(count):
        if pos + _LEN.size > len(data):
            raise FormatError(f"{path}: id table truncated at entry {n}")
        (length,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + length > len(data):
            raise FormatError(f"{path}: id table truncated at entry {n}")
        try:
            ids.append(data[pos:pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: id {n} is not valid UTF-8") from exc
        pos += length
    expected = pos + 4 * count * dim
    if len(data) != expected:
        raise FormatError(f"{path}: payload is {len(data) - pos} bytes, expected {4 * count * dim}")
    vectors = np.frombuffer(data, dtype="<f4", offset=pos).reshape(count, dim)
    try:
        return DescriptorIndex(ids, vectors)
    except BuildError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_descriptors(path, vectors) -> None:
    """Raw row-major little-endian float32 payload, no header."""
    Path(path).write_bytes(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def read_descriptors(path, count: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if count <= 0:
        raise FormatError(f"{path}: descriptor count must be positive")
    if len(data) % (4 * count):
        raise FormatError(f"{path}: {len(data)} bytes is not {count} rows of float32")
    dim = len(data) // (4 * count)
    if dim == 0:
        raise FormatError(f"{path}: empty descriptor payload")
    return np.frombuffer(data, dtype="<f4").reshape(count, dim).astype(np.float32)
