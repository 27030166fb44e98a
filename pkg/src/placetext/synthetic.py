"""Synthetic multi-floor dataset with perceptual aliasing across floors.

Place ``p`` looks almost the same on every floor: its database descriptors
differ only by noise of size ``eps``, while each query carries view noise of
size ``query_noise`` that swamps ``eps``. Appearance alone therefore cannot
tell floors apart. Every image carries a room number unique to its
(floor, place) plus generic signage, which lets text re-ranking recover the
floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import BoqConfig, BoqParams, aggregate
from .dataset import DatasetManifest, ImageRecord
from .numerics import make_rng
from .textverify import TextAnnotation, TextEntry

__all__ = ["SyntheticMaze", "make_maze"]

GENERIC_SIGNS = ("Exit", "Fire Extinguisher", "Toilet", "No Smoking")


@dataclass(frozen=True)
class SyntheticMaze:
    manifest: DatasetManifest
    descriptors: np.ndarray
    annotations: dict[str, TextAnnotation]


def room_number(floor: int, place: int) -> str:
    return f"{floor}{place:02d}"


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_maze(
    floors: int = 5,
    places: int = 40,
    dim: int = 64,
    eps: float = 0.002,
    query_noise: float = 0.2,
    spacing: float = 10.0,
    seed: int = 0,
    via_aggregator: bool = False,
    boq: BoqConfig | None = None,
) -> SyntheticMaze:
    """Build one database image and one query image per (floor, place).

    With ``via_aggregator`` the noise is applied to feature tokens and the
    descriptors come out of a seeded aggregator instead of being drawn
    directly; ``dim`` then comes from ``boq.output_dim``.
    """
    rng = make_rng(seed)
    records, annotations, rows = [], {}, []
    if via_aggregator:
        cfg = boq or BoqConfig()
        params = BoqParams.seeded(cfg, seed + 1)
        tokens = 16
        base = rng.standard_normal((places, tokens, cfg.model_dim))
        offsets = eps * rng.standard_normal((floors, places, tokens, cfg.model_dim))
        views = query_noise * rng.standard_normal((floors, places, tokens, cfg.model_dim))

        def describe(f, p, query):
            x = base[p] + offsets[f, p] + (views[f, p] if query else 0.0)
            return aggregate(x, params)
    else:
        base = _unit(rng.standard_normal((places, dim)))
        offsets = eps * rng.standard_normal((floors, places, dim)) / np.sqrt(dim)
        views = query_noise * rng.standard_normal((floors, places, dim)) / np.sqrt(dim)

        def describe(f, p, query):
            return _unit(base[p] + offsets[f, p] + (views[f, p] if query else 0.0))

    generic = rng.integers(0, len(GENERIC_SIGNS), size=(floors, places))
    for split in ("db", "query"):
        for f in range(floors):
            for p in range(places):
                rid = f"f{f + 1}_p{p:02d}_{split}"
                jitter = 0.5 if split == "query" else 0.0
                records.append(ImageRecord(rid, f"floor{f + 1}/{rid}.jpg", spacing * p + jitter, 0.0, 90.0, str(f + 1), split))
                rows.append(describe(f, p, split == "query"))
                annotations[rid] = TextAnnotation(
                    rid,
                    (
                        TextEntry(f"Room {room_number(f + 1, p)}", 0.95),
                        TextEntry(GENERIC_SIGNS[generic[f, p]], 0.9),
                        TextEntry("B2", 0.2),
                    ),
                )
    return SyntheticMaze(DatasetManifest(tuple(records)), np.stack(rows).astype(np.float32), annotations)
