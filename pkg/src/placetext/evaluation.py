"""Recall@K, the retrieve-then-rerank evaluation loop, and per-stage latency tables.

Queries whose ground-truth set is empty are left out of every recall
denominator and reported as ``num_excluded``. Percentiles use the
nearest-rank method on sorted samples.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import DatasetManifest, GroundTruth, build_ground_truth
from .errors import ConfigurationError, EvaluationError
from .retrieval import build_index, knn
from .textverify import DEFAULT_CONF_THRESHOLD, FilterKind, TextAnnotation, filter_texts, rerank

__all__ = [
    "STAGES",
    "EvalConfig",
    "EvalReport",
    "latency_report",
    "nearest_rank",
    "recall_at_k",
    "run_pipeline",
]

SCHEMA_VERSION = 1
STAGES = ("Extraction", "Retrieval", "STS", "Re-rank")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 5)
    radius: float = 5.0
    top_k: int = 100
    filter: str = "rule"
    rerank: bool = True
    ablation: bool = False
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    threads: int = 1
    trace: bool = False

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        object.__setattr__(self, "ks", ks)
        if self.ablation and not self.rerank:
            # the ablation compares against the re-ranked run
            object.__setattr__(self, "rerank", True)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigurationError(f"K values must be positive and strictly ascending, got {ks}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if not self.radius >= 0:
            raise ConfigurationError("radius must be non-negative")
        FilterKind(self.filter)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d


def recall_at_k(results: Mapping[str, Sequence[str]], gt: GroundTruth, ks: Sequence[int]) -> dict[int, float]:
    """Percentage of evaluable queries with a positive among their first K candidates."""
    evaluable = {}
    for q, ranked in results.items():
        if q not in gt:
            raise EvaluationError(f"query {q!r} has no ground-truth entry")
        if gt[q]:
            evaluable[q] = ranked
    if not evaluable:
        raise EvaluationError("no evaluable queries (every query lacks positives)")
    out = {}
    for k in ks:
        hits = sum(1 for q, ranked in evaluable.items() if any(c in gt[q] for c in list(ranked)[:k]))
        out[int(k)] = 100.0 * hits / len(evaluable)
    return out


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_values[rank - 1])


def latency_report(traces: Sequence[Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """mean / median / p95 in milliseconds for each fixed stage."""
    if not traces:
        raise EvaluationError("latency report needs at least one trace")
    out = {}
    for stage in STAGES:
        vals = sorted(float(t.get(stage, 0.0)) for t in traces)
        out[stage] = {
            "mean": float(sum(vals) / len(vals)),
            "median": nearest_rank(vals, 50),
            "p95": nearest_rank(vals, 95),
        }
    return out


@dataclass
class EvalReport:
    config: dict
    recall: dict[int, float]
    recall_no_rerank: dict[int, float] | None
    num_queries: int
    num_excluded: int
    consistency: dict[str, bool]
    latency: dict[str, dict[str, float]]
    database_sts_ms: float
    traces: list[dict] | None = None
    schema_version: int = field(default=SCHEMA_VERSION)

    @property
    def ok(self) -> bool:
        return all(self.consistency.values())

    def to_json(self, include_latency: bool = True) -> dict:
        d = {
            "schema_version": self.schema_version,
            "config": self.config,
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
            "recall": {str(k): v for k, v in self.recall.items()},
            "recall_no_rerank": None if self.recall_no_rerank is None else {str(k): v for k, v in self.recall_no_rerank.items()},
            "consistency": self.consistency,
        }
        if self.traces is not None:
            d["traces"] = [{k: v for k, v in t.items() if include_latency or k != "latency_ms"} for t in self.traces]
        if include_latency:
            d["latency_ms"] = self.latency
            d["database_sts_ms"] = self.database_sts_ms
        return d

    def dumps(self, include_latency: bool = True) -> str:
        return json.dumps(self.to_json(include_latency), sort_keys=True, indent=2)

    def to_table(self) -> str:
        cfg = self.config
        lines = [
            f"positive radius: {cfg['radius']} m | top-K: {cfg['top_k']} | filter: {cfg['filter']} | rerank: {cfg['rerank']}",
            f"queries: {self.num_queries} evaluated, {self.num_excluded} excluded (no positives)",
            "",
            f"{'K':>5}  {'R@K':>8}" + (f"  {'no rerank':>10}" if self.recall_no_rerank else ""),
        ]
        for k, v in self.recall.items():
            row = f"{k:>5}  {v:8.1f}"
            if self.recall_no_rerank:
                row += f"  {self.recall_no_rerank[k]:10.1f}"
            lines.append(row)
        lines += ["", f"{'stage':<11}{'mean':>9}{'median':>9}{'p95':>9}   (ms per query)"]
        for stage, s in self.latency.items():
            lines.append(f"{stage:<11}{s['mean']:9.3f}{s['median']:9.3f}{s['p95']:9.3f}")
        lines.append(f"database-side STS ingest: {self.database_sts_ms:.3f} ms total")
        for name, passed in self.consistency.items():
            lines.append(f"check {name}: {'ok' if passed else 'FAILED'}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "recall", "recall_no_rerank"])
        for k, v in self.recall.items():
            base = "" if self.recall_no_rerank is None else f"{self.recall_no_rerank[k]:.6f}"
            w.writerow([k, f"{v:.6f}", base])
        return buf.getvalue()


def _monotone(r: Mapping[int, float]) -> bool:
    vals = [r[k] for k in sorted(r)]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def run_pipeline(
    manifest: DatasetManifest,
    descriptors: np.ndarray,
    annotations: Mapping[str, TextAnnotation] | None,
    config: EvalConfig = EvalConfig(),
    client=None,
    ground_truth: GroundTruth | None = None,
) -> EvalReport:
    """Retrieve every query, optionally re-rank by text, and score recalls.

    ``descriptors`` row ``i`` belongs to manifest record ``i``. With
    ``config.ablation`` the report carries recalls both with and without
    re-ranking.
    """
    descriptors = np.asarray(descriptors)
    if descriptors.ndim != 2 or len(descriptors) != len(manifest):
        raise ConfigurationError(f"{len(descriptors)} descriptor rows for {len(manifest)} manifest records")
    reranking = config.rerank
    if reranking and annotations is None:
        raise ConfigurationError("re-ranking requested but no annotations were supplied")
    kind = FilterKind(config.filter)
    if kind is FilterKind.LLM and reranking and client is None:
        raise ConfigurationError("llm filter requested but no client configured")

    rows = {r.id: i for i, r in enumerate(manifest.records)}
    db = manifest.database
    queries = manifest.queries
    if not db or not queries:
        raise ConfigurationError("manifest needs both db and query records")
    gt = ground_truth or build_ground_truth(queries, db, config.radius)
    index = build_index((r.id, descriptors[rows[r.id]]) for r in db)
    annotations = annotations or {}

    db_filtered: dict[str, list[str]] = {}
    t0 = time.perf_counter()
    if reranking:
        for r in db:
            ann = annotations.get(r.id)
            db_filtered[r.id] = filter_texts(ann.strings(config.conf_threshold), kind, client) if ann else []
    database_sts_ms = (time.perf_counter() - t0) * 1e3

    def one(q):
        lat = {}
        t = time.perf_counter()
        vec = np.array(descriptors[rows[q.id]], dtype=np.float64)
        lat["Extraction"] = (time.perf_counter() - t) * 1e3
        t = time.perf_counter()
        res = knn(index, vec, config.top_k, q.id)
        lat["Retrieval"] = (time.perf_counter() - t) * 1e3
        t = time.perf_counter()
        ann = annotations.get(q.id)
        q_texts = ann.strings(config.conf_threshold) if ann else []
        lat["STS"] = (time.perf_counter() - t) * 1e3
        ranked = None
        t = time.perf_counter()
        if reranking:
            ranked = rerank(res, q_texts, db_filtered, kind, client, prefiltered=True).ids
        lat["Re-rank"] = (time.perf_counter() - t) * 1e3
        return q.id, res.ids, ranked, lat, q_texts

    threads = config.threads or os.cpu_count() or 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(one, queries))
    else:
        outputs = [one(q) for q in queries]

    retrieved = {qid: ids for qid, ids, _, _, _ in outputs}
    base = recall_at_k(retrieved, gt, config.ks)
    consistency = {"recall_monotone": _monotone(base)}
    if reranking:
        reranked = {qid: ranked for qid, _, ranked, _, _ in outputs}
        final = recall_at_k(reranked, gt, config.ks)
        consistency["recall_monotone"] = consistency["recall_monotone"] and _monotone(final)
        window_base = recall_at_k(retrieved, gt, [config.top_k])[config.top_k]
        window_rr = recall_at_k(reranked, gt, [config.top_k])[config.top_k]
        consistency["rerank_window_invariant"] = window_base == window_rr
    else:
        final = base

    num_excluded = sum(1 for q in queries if not gt[q.id])
    traces = None
    if config.trace:
        traces = [
            {"query": qid, "retrieved": ids[:10], "reranked": None if rr is None else rr[:10], "texts": texts, "latency_ms": lat}
            for qid, ids, rr, lat, texts in outputs
        ]
    return EvalReport(
        config=config.to_json(),
        recall=final,
        recall_no_rerank=base if config.ablation else None,
        num_queries=len(queries) - num_excluded,
        num_excluded=num_excluded,
        consistency=consistency,
        latency=latency_report([o[3] for o in outputs]),
        database_sts_ms=database_sts_ms,
        traces=traces,
    )
