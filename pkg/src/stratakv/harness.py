"""Experiment sweeps and streaming runs over synthetic workloads.

Report layout (stable; downstream plotting depends on it):

``summary.json``
    ``{"config": <resolved RunConfig>, "cells": [...], "audit": {...}}``; each
    cell has ``context, granularity, budget, M, L, P, recall_mean,
    scanned_mean, active_mean, centroid_updates, kmeans_dot_products,
    index_bytes, kv_bytes, memory_ratio``.
``cells.csv``
    One row per cell, columns ``CELL_COLUMNS``.
``queries.csv``
    One row per (cell, query), columns ``QUERY_COLUMNS``.

Wall-clock timings go to ``timings.json`` only when requested, so the files
above stay byte-identical across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from stratakv.chunker import ChunkPolicy, segment_levels
from stratakv.evaluator import (
    StabilityTrace,
    audit_ub_soundness,
    covering_violations,
    jaccard,
    oracle_topk_tokens,
    recall_rate,
    window_hit,
)
from stratakv.kv_index import IndexConfig, build_index, index_memory_bytes
from stratakv.retriever import Budgets, retrieve
from stratakv.streamer import StreamState, decode_step
from stratakv.workload import Workload, WorkloadSpec, gen_clustered_workload

logger = logging.getLogger(__name__)

CELL_COLUMNS = [
    "context", "granularity", "budget", "M", "L", "P", "recall_mean", "scanned_mean",
    "active_mean", "centroid_updates", "kmeans_dot_products", "index_bytes", "kv_bytes",
    "memory_ratio",
]
QUERY_COLUMNS = ["context", "granularity", "budget", "query", "recall", "scanned_centroids", "active_count"]


@dataclass(frozen=True)
class RunConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    chunk: ChunkPolicy = field(default_factory=ChunkPolicy)
    index: IndexConfig = field(default_factory=IndexConfig)
    budgets: Budgets = field(default_factory=Budgets)
    contexts: tuple[int, ...] = (8192, 16384, 32768, 65536)
    token_budgets: tuple[int, ...] = (256, 512, 1024, 2048)
    granularities: tuple[float, ...] = (1, 2, 4, 8)
    audit_queries: int = 256
    out_dir: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("contexts", "token_budgets", "granularities"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"sweep list {name} must be non-empty")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["chunk"] = {"min_len": self.chunk.min_len, "max_len": self.chunk.max_len}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, typ in (("workload", WorkloadSpec), ("chunk", ChunkPolicy), ("index", IndexConfig), ("budgets", Budgets)):
            if name in data:
                kwargs[name] = typ(**data.pop(name))
        for name in ("contexts", "token_budgets", "granularities"):
            if name in data:
                kwargs[name] = tuple(data.pop(name))
        kwargs.update(data)
        return cls(**kwargs)


def _random_queries(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)) * rng.uniform(0.1, 10.0, size=(n, 1))


def run_bench(cfg: RunConfig, out_dir: Optional[Path] = None, timings: bool = False) -> dict:
    """Sweep contexts x granularities x budgets and write the reports.

    Returns the summary dict; ``summary["audit"]["ok"]`` is False when any
    covering or bound audit found a violation.
    """
    cells: list[dict] = []
    query_rows: list[list] = []
    audit = {"ub_violations": 0, "covering_violations": 0}
    clock: dict[str, float] = {}
    for context in cfg.contexts:
        spec = dataclasses.replace(cfg.workload, n_tokens=context)
        wl = gen_clustered_workload(spec)
        spans = segment_levels(wl.boundaries, cfg.chunk)
        store = wl.store()
        oracles = {b: [oracle_topk_tokens(q, wl.keys, b) for q in wl.queries] for b in cfg.token_budgets}
        audit_qs = np.vstack([wl.queries, _random_queries(cfg.audit_queries, spec.d, spec.seed + 1)])
        for gran in cfg.granularities:
            icfg = dataclasses.replace(cfg.index, avg_chunks_per_cluster=gran)
            t0 = time.perf_counter()
            index = build_index(store, spans, icfg)
            clock[f"build/{context}/{gran}"] = time.perf_counter() - t0
            audit["ub_violations"] += audit_ub_soundness(index, audit_qs)
            audit["covering_violations"] += covering_violations(index)
            index_bytes, kv_bytes, ratio = index_memory_bytes(index)
            for budget in cfg.token_budgets:
                budgets = dataclasses.replace(cfg.budgets, k_c=None, token_budget=budget)
                recalls, scans, actives = [], [], []
                for qi, q in enumerate(wl.queries):
                    res = retrieve(index, q, budgets)
                    rec = recall_rate(res.active_token_ids, oracles[budget][qi])
                    recalls.append(rec)
                    scans.append(res.scanned_centroids)
                    actives.append(len(res.active_token_ids))
                    query_rows.append([context, gran, budget, qi, rec, res.scanned_centroids, len(res.active_token_ids)])
                cells.append({
                    "context": context,
                    "granularity": gran,
                    "budget": budget,
                    "M": index.n_chunks,
                    "L": index.n_fine,
                    "P": index.n_coarse,
                    "recall_mean": float(np.mean(recalls)) if recalls else None,
                    "scanned_mean": float(np.mean(scans)) if scans else None,
                    "active_mean": float(np.mean(actives)) if actives else None,
                    "centroid_updates": index.build_stats["centroid_updates"],
                    "kmeans_dot_products": index.build_stats["kmeans_dot_products"],
                    "index_bytes": index_bytes,
                    "kv_bytes": kv_bytes,
                    "memory_ratio": ratio,
                })
            logger.info("cell context=%d granularity=%s done", context, gran)
    audit["ok"] = audit["ub_violations"] == 0 and audit["covering_violations"] == 0
    summary = {"config": cfg.to_dict(), "cells": cells, "audit": audit}
    out = Path(out_dir or cfg.out_dir or ".")
    if out_dir is not None or cfg.out_dir is not None:
        write_reports(summary, query_rows, out)
        if timings:
            (out / "timings.json").write_text(json.dumps(clock, indent=2, sort_keys=True) + "\n")
    return summary


def write_reports(summary: dict, query_rows: list[list], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for cell in summary["cells"]:
            w.writerow([cell[c] for c in CELL_COLUMNS])
    with open(out / "queries.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUERY_COLUMNS)
        w.writerows(query_rows)


def stationary_queries(wl: Workload, blob: int, steps: int, seed: int, spread: float = 0.1) -> np.ndarray:
    """Queries jittered around one blob centre."""
    rng = np.random.default_rng(seed)
    d = wl.centers.shape[1]
    dirs = wl.centers[blob] + rng.standard_normal((steps, d)) * spread / np.sqrt(d)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * np.sqrt(d)


def run_stream(
    spec: WorkloadSpec,
    prefill: int,
    steps: int,
    budgets: Budgets = Budgets(),
    policy: ChunkPolicy = ChunkPolicy(),
    index_cfg: IndexConfig = IndexConfig(),
    graft_scope: str = "scoped",
    window: int = 32,
    query_blob: int = 0,
    sink=None,
) -> dict:
    """Prefill an index, then decode ``steps`` tokens with stationary queries.

    ``sink`` receives one dict per step (``step, active_count,
    scanned_centroids, jaccard, window_hit``).
    """
    if not 1 <= prefill:
        raise ValueError("prefill must be >= 1")
    wl = gen_clustered_workload(dataclasses.replace(spec, n_tokens=prefill + steps))
    index = build_index(wl.store(prefill), segment_levels(wl.boundaries[:prefill], policy), index_cfg)
    state = StreamState(index, policy=policy, graft_scope=graft_scope, window=window)
    queries = stationary_queries(wl, query_blob % wl.centers.shape[0], steps, spec.seed + 7)
    trace = StabilityTrace(window=window)
    jac_series, hit_series, scans = [], [], []
    for t in range(steps):
        _, res = decode_step(state, queries[t], budgets, wl.record(prefill + t))
        current = frozenset(res.selected_clusters)
        hit = window_hit(trace.sets[-window:], current)
        jac = jaccard(current, trace.sets[-1]) if trace.sets else None
        trace.sets.append(current)
        hit_series.append(hit)
        if jac is not None:
            jac_series.append(jac)
        scans.append(res.scanned_centroids)
        if sink is not None:
            sink({"step": t, "active_count": int(len(res.active_token_ids)),
                  "scanned_centroids": res.scanned_centroids, "jaccard": jac, "window_hit": hit})
    computations = [g.distance_computations for g in state.grafts]
    return {
        "steps": steps,
        "grafts": len(state.grafts),
        "L": index.n_fine,
        "P": index.n_coarse,
        "mean_window_hit": float(np.mean(hit_series)) if hit_series else None,
        "mean_jaccard": float(np.mean(jac_series)) if jac_series else None,
        "mean_scanned_centroids": float(np.mean(scans)) if scans else None,
        "max_graft_computations": max(computations) if computations else 0,
        "vacuous_steps": trace.empty_steps(),
        "covering_violations": covering_violations(index),
        "jaccard_series": jac_series,
        "window_hit_series": hit_series,
    }
