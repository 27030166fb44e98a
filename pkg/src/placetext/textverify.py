"""Scene-text verification: discriminative-text filters, set similarity, re-ranking.

Strings are compared after :func:`normalize_text` (NFKC, case-fold, collapsed
whitespace), as exact-match sets. The query and database sides go through the
same filter.
"""
from __future__ import annotations

import enum
import json
import unicodedata
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, NamedTuple

from .errors import ConfigurationError, FilterError, FormatError, LlmError
from .fusion import Region
from .retrieval import RetrievalResult

if TYPE_CHECKING:
    from .llm import LlmClient

__all__ = [
    "DEFAULT_CONF_THRESHOLD",
    "FilterKind",
    "RerankedCandidate",
    "RerankedResult",
    "TextAnnotation",
    "TextEntry",
    "annotation_strings",
    "filter_texts",
    "llm_filter",
    "load_annotations",
    "normalize_text",
    "rerank",
    "rule_filter",
    "save_annotations",
    "text_similarity",
]

DEFAULT_CONF_THRESHOLD = 0.5


class FilterKind(str, enum.Enum):
    RULE = "rule"
    LLM = "llm"


@dataclass(frozen=True)
class TextEntry:
    s: str
    conf: float = 1.0
    box: Region | None = None

    def __post_init__(self):
        if not isinstance(self.s, str) or not self.s.strip():
            raise ValueError("text string must be non-empty after trimming")
        if not (isinstance(self.conf, (int, float)) and 0.0 <= self.conf <= 1.0):
            raise ValueError(f"confidence {self.conf!r} outside [0, 1]")

    def to_json(self) -> dict:
        obj: dict = {"s": self.s, "conf": self.conf}
        if self.box is not None:
            obj["box"] = [self.box.x0, self.box.y0, self.box.x1, self.box.y1]
        return obj


@dataclass(frozen=True)
class TextAnnotation:
    image_id: str
    texts: tuple[TextEntry, ...] = ()

    def strings(self, threshold: float = DEFAULT_CONF_THRESHOLD) -> list[str]:
        """Spotted strings whose recognition confidence reaches ``threshold``."""
        return [t.s for t in self.texts if t.conf >= threshold]

    def to_json(self) -> dict:
        return {"id": self.image_id, "texts": [t.to_json() for t in self.texts]}

    @classmethod
    def from_json(cls, obj: dict) -> "TextAnnotation":
        texts = []
        for t in obj.get("texts", []):
            box = Region.from_box(t["box"]) if t.get("box") is not None else None
            texts.append(TextEntry(t["s"], float(t.get("conf", 1.0)), box))
        return cls(str(obj["id"]), tuple(texts))


def load_annotations(path) -> dict[str, TextAnnotation]:
    """Read a JSON-lines annotation file keyed by image id."""
    out: dict[str, TextAnnotation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ann = TextAnnotation.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: bad annotation: {exc}") from exc
            if ann.image_id in out:
                raise FormatError(f"{path}:{lineno}: duplicate annotation for {ann.image_id!r}")
            out[ann.image_id] = ann
    return out


def save_annotations(annotations: Iterable[TextAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json(), ensure_ascii=False) + "\n")


def annotation_strings(annotations: Mapping[str, TextAnnotation], threshold: float = DEFAULT_CONF_THRESHOLD) -> dict[str, list[str]]:
    return {k: a.strings(threshold) for k, a in annotations.items()}


def normalize_text(s: str) -> str:
    return " ".join(unicodedata.normalize("NFKC", s).casefold().split())


def rule_filter(texts: Iterable[str]) -> list[str]:
    """Keep normalised strings that contain at least one decimal digit."""
    out = []
    for t in texts:
        n = normalize_text(t)
        if any(ch.isdecimal() for ch in n):
            out.append(n)
    return out


def llm_filter(texts: Iterable[str], client: "LlmClient", fallback: bool | None = None) -> list[str]:
    """Ask the language-model client which strings are discriminative.

    ``fallback=None`` defers to the client's configured mode. The result is
    always a subset of the normalised input.
    """
    normalized = [n for n in (normalize_text(t) for t in texts) if n]
    if fallback is None:
        fallback = client.config.mode == "fallback-to-rule"
    try:
        kept = set(client.request_filter(normalized))
    except LlmError as exc:
        if fallback:
            return rule_filter(normalized)
        raise FilterError(f"language-model filter failed: {exc}") from exc
    return [n for n in normalized if n in kept]


def filter_texts(texts: Iterable[str], kind: FilterKind | str = FilterKind.RULE, client: "LlmClient | None" = None) -> list[str]:
    kind = FilterKind(kind)
    if kind is FilterKind.RULE:
        return rule_filter(texts)
    if client is None:
        raise ConfigurationError("the llm filter needs a configured client")
    return llm_filter(texts, client)


def text_similarity(t_query, t_db) -> float:
    """``|T_query & T_db| / |T_query|``; 0.0 when the query set is empty."""
    q = set(t_query)
    if not q:
        return 0.0
    return len(q & set(t_db)) / len(q)


class RerankedCandidate(NamedTuple):
    id: str
    score: float
    original_rank: int
    distance: float


@dataclass(frozen=True)
class RerankedResult:
    query_id: str
    candidates: tuple[RerankedCandidate, ...]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.candidates]

    def to_json(self) -> dict:
        return {"query": self.query_id, "candidates": [c._asdict() for c in self.candidates]}


def rerank(
    result: RetrievalResult,
    query_texts: Iterable[str],
    db_texts: Mapping[str, Iterable[str]] | None,
    filter: FilterKind | str = FilterKind.RULE,
    client: "LlmClient | None" = None,
    prefiltered: bool = False,
) -> RerankedResult:
    """Reorder retrieval candidates by text similarity to the query.

    ``db_texts`` maps candidate ids to their spotted strings; a missing id
    counts as no text. With ``prefiltered=True`` the values are taken as
    already-filtered normalised strings. Ties keep the retrieval order.
    """
    if db_texts is None:
        raise ConfigurationError("re-ranking needs database annotations")
    query_set = set(filter_texts(query_texts, filter, client))
    scored = []
    for rank, cand in enumerate(result.candidates):
        if query_set:
            texts = db_texts.get(cand.id, ())
            db_set = set(texts) if prefiltered else set(filter_texts(texts, filter, client))
            score = text_similarity(query_set, db_set)
        else:
            score = 0.0
        scored.append(RerankedCandidate(cand.id, score, rank, cand.distance))
    if query_set:
        scored.sort(key=lambda c: (-c.score, c.original_rank))
    return RerankedResult(result.query_id, tuple(scored))
