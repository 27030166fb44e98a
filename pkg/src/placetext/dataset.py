"""Dataset manifests, pose-to-class partitioning and ground-truth construction.

Manifest files are JSON lines with one image per line::

    {"id": "f1_0001", "path": "f1/0001.jpg", "x": 3.2, "y": -1.5,
     "heading": 90.0, "floor": "1", "split": "db"}

Class cells use floor division (toward negative infinity) on ``x / M``,
``y / M`` and ``heading / alpha``, with headings first wrapped into [0, 360).
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import ManifestError, ParameterError
from .textverify import DEFAULT_CONF_THRESHOLD, TextAnnotation

log = logging.getLogger(__name__)

__all__ = [
    "ClassPartition",
    "DatasetManifest",
    "GroundTruth",
    "ImageRecord",
    "PartitionParams",
    "PlaceClass",
    "assign_class",
    "build_ground_truth",
    "group_classes",
    "load_manifest",
    "pose_distance",
    "save_manifest",
    "select_text_queries",
    "validate_manifest",
    "wrap_heading",
]

SPLITS = ("db", "query")


def wrap_heading(heading: float) -> float:
    h = heading % 360.0
    # tiny negatives wrap to exactly 360.0 in floating point
    return 0.0 if h >= 360.0 else h


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    x: float
    y: float
    heading: float
    floor: str | int
    split: str = "db"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "x": self.x,
            "y": self.y,
            "heading": self.heading,
            "floor": self.floor,
            "split": self.split,
        }


class PlaceClass(NamedTuple):
    e: int
    n: int
    h: int


@dataclass(frozen=True)
class PartitionParams:
    M: float = 2.0
    alpha: float = 3.0

    def __post_init__(self):
        if not (math.isfinite(self.M) and self.M > 0):
            raise ParameterError(f"cell side M must be positive, got {self.M}")
        if not (math.isfinite(self.alpha) and 0 < self.alpha <= 360):
            raise ParameterError(f"heading slice alpha must be in (0, 360], got {self.alpha}")

    @property
    def heading_classes(self) -> int:
        return math.ceil(360.0 / self.alpha)


def assign_class(record: ImageRecord, params: PartitionParams) -> PlaceClass:
    if not isinstance(params, PartitionParams):
        raise ParameterError("params must be PartitionParams")
    return PlaceClass(
        int(record.x // params.M),
        int(record.y // params.M),
        int(wrap_heading(record.heading) // params.alpha),
    )


@dataclass
class ClassPartition:
    classes: dict[PlaceClass, list[str]]
    min_images: int
    undersized: set[PlaceClass] = field(default_factory=set)

    def trainable(self) -> dict[PlaceClass, list[str]]:
        return {c: ids for c, ids in self.classes.items() if c not in self.undersized}

    def to_json(self) -> dict:
        return {
            "min_images": self.min_images,
            "classes": [
                {"class": list(c), "ids": ids, "excluded": c in self.undersized}
                for c, ids in sorted(self.classes.items())
            ],
        }


def group_classes(records: Iterable[ImageRecord], params: PartitionParams, min_images: int = 4) -> ClassPartition:
    """Bucket records by class cell; cells with fewer than ``min_images`` are flagged."""
    classes: dict[PlaceClass, list[str]] = defaultdict(list)
    for r in records:
        classes[assign_class(r, params)].append(r.id)
    classes = dict(classes)
    undersized = {c for c, ids in classes.items() if len(ids) < min_images}
    return ClassPartition(classes, min_images, undersized)


def pose_distance(a: ImageRecord, b: ImageRecord) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class GroundTruth:
    positives: Mapping[str, frozenset[str]]
    radius: float

    def __getitem__(self, query_id: str) -> frozenset[str]:
        return self.positives[query_id]

    def __contains__(self, query_id) -> bool:
        return query_id in self.positives

    def to_json(self) -> dict:
        return {"radius": self.radius, "positives": {q: sorted(p) for q, p in self.positives.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls({q: frozenset(p) for q, p in obj["positives"].items()}, float(obj["radius"]))


def build_ground_truth(queries: Iterable[ImageRecord], database: Iterable[ImageRecord], radius: float = 5.0) -> GroundTruth:
    """Same-floor database images within ``radius`` metres (planar) of each query."""
    if not radius >= 0:
        raise ParameterError(f"radius must be non-negative, got {radius}")
    by_floor: dict[str, list[ImageRecord]] = defaultdict(list)
    for r in database:
        by_floor[str(r.floor)].append(r)
    xy = {f: np.array([[r.x, r.y] for r in recs]) for f, recs in by_floor.items()}
    positives = {}
    for q in queries:
        recs = by_floor.get(str(q.floor), [])
        if not recs:
            positives[q.id] = frozenset()
            continue
        pts = xy[str(q.floor)]
        d = np.hypot(pts[:, 0] - q.x, pts[:, 1] - q.y)
        positives[q.id] = frozenset(recs[i].id for i in np.flatnonzero(d <= radius))
    return GroundTruth(positives, radius)


def select_text_queries(
    records: Iterable[ImageRecord],
    annotations: Mapping[str, TextAnnotation],
    threshold: float = DEFAULT_CONF_THRESHOLD,
) -> list[str]:
    out = []
    for r in records:
        ann = annotations.get(r.id)
        if ann is not None and ann.strings(threshold):
            out.append(r.id)
    return out


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def database(self) -> list[ImageRecord]:
        return [r for r in self.records if r.split == "db"]

    @property
    def queries(self) -> list[ImageRecord]:
        return [r for r in self.records if r.split == "query"]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


def _number(obj: dict, key: str, line: int | None) -> float:
    if key not in obj or obj[key] is None:
        raise ManifestError(f"missing {key!r}", line)
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ManifestError(f"{key!r} must be a finite number, got {v!r}", line)
    return float(v)


def validate_manifest(entries, lines=None) -> DatasetManifest:
    """Check raw manifest objects (or records) and return a manifest.

    ``lines`` gives the 1-based file line of each entry for error messages.
    Headings outside [0, 360) are wrapped and a warning is recorded.
    """
    records = []
    notes = []
    seen: dict[str, int | None] = {}
    for i, obj in enumerate(entries):
        line = lines[i] if lines is not None else i + 1
        if isinstance(obj, ImageRecord):
            obj = obj.to_json()
        if not isinstance(obj, dict):
            raise ManifestError("entry is not a JSON object", line)
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise ManifestError("missing or empty 'id'", line)
        if rid in seen:
            raise ManifestError(f"duplicate id {rid!r} (first seen on line {seen[rid]})", line)
        seen[rid] = line
        path = obj.get("path", "")
        if not isinstance(path, str):
            raise ManifestError("'path' must be a string", line)
        x = _number(obj, "x", line)
        y = _number(obj, "y", line)
        heading = _number(obj, "heading", line)
        if "floor" not in obj or obj["floor"] is None or isinstance(obj["floor"], bool):
            raise ManifestError("missing 'floor'", line)
        floor = obj["floor"]
        if not isinstance(floor, (str, int)):
            raise ManifestError(f"'floor' must be a string or integer, got {floor!r}", line)
        split = obj.get("split", "db")
        if split not in SPLITS:
            raise ManifestError(f"'split' must be one of {SPLITS}, got {split!r}", line)
        wrapped = wrap_heading(heading)
        if wrapped != heading:
            msg = f"line {line}: heading {heading:g} wrapped to {wrapped:g} for {rid!r}"
            log.warning(msg)
            notes.append(msg)
            heading = wrapped
        records.append(ImageRecord(rid, path, x, y, heading, floor, split))
    return DatasetManifest(tuple(records), tuple(notes))


def load_manifest(path) -> DatasetManifest:
    entries, lines = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                entries.append(json.loads(raw))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            lines.append(lineno)
    return validate_manifest(entries, lines)


def save_manifest(manifest: DatasetManifest | Iterable[ImageRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
