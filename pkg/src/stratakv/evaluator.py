"""Brute-force oracles and the metrics used to score retrieval quality."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from stratakv.kv_index import HierarchicalIndex


def full_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact softmax attention over every stored token.

    Written independently of the retriever's kernel so the two can check
    each other; uses log-sum-exp instead of max subtraction.
    """
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty store")
    d = keys.shape[1]
    logits = np.einsum("nd,d->n", keys, np.asarray(q, dtype=float)) / math.sqrt(d)
    lse = np.logaddexp.reduce(logits)
    return np.einsum("n,nd->d", np.exp(logits - lse), values)


def oracle_topk_tokens(q: np.ndarray, keys: np.ndarray, budget: int) -> np.ndarray:
    """Ids of the ``budget`` largest q.k scores, ties toward smaller id."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    scores = np.asarray(keys, dtype=float) @ np.asarray(q, dtype=float)
    n = scores.shape[0]
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:budget]).astype(np.int64)


def recall_rate(retrieved: Iterable[int], oracle: Iterable[int]) -> float:
    oracle = set(int(i) for i in oracle)
    if not oracle:
        raise ValueError("empty oracle")
    hit = oracle.intersection(int(i) for i in retrieved)
    return len(hit) / len(oracle)


def jaccard(current: Iterable[int], previous: Iterable[int]) -> float:
    """Set overlap; two empty sets count as identical."""
    a, b = set(current), set(previous)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def window_hit(history: Sequence[Iterable[int]], current: Iterable[int]) -> float:
    """Fraction of ``current`` seen anywhere in ``history``.

    An empty ``current`` is vacuously 1.0; callers should flag such steps.
    """
    current = set(current)
    if not current:
        return 1.0
    seen = set().union(*map(set, history)) if history else set()
    return len(current & seen) / len(current)


def _descendant_max(scores: np.ndarray, groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Per-group max over columns of ``scores`` (queries x chunks)."""
    out = np.full((scores.shape[0], len(groups)), -np.inf)
    nonempty = [g for g, cols in enumerate(groups) if len(cols)]
    if not nonempty:
        return out
    order = np.concatenate([np.asarray(groups[g], dtype=np.int64) for g in nonempty])
    starts = np.cumsum([0] + [len(groups[g]) for g in nonempty[:-1]])
    out[:, nonempty] = np.maximum.reduceat(scores[:, order], starts, axis=1)
    return out


def audit_ub_soundness(
    index: HierarchicalIndex, queries: np.ndarray, tol: float = 1e-6, batch: int = 1000
) -> int:
    """Count (query, node) pairs whose best descendant dot product beats the bound.

    Checks every fine cluster and coarse unit against the chunk keys below
    it, by exhaustive scan.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    reps = index.rep_keys
    fine_groups = [list(m) for m in index.fine_members]
    coarse_groups = [index.unit_chunks(g) for g in range(index.n_coarse)]
    violations = 0
    for lo in range(0, queries.shape[0], batch):
        qb = queries[lo : lo + batch]
        dots = qb @ reps.T
        qnorm = np.linalg.norm(qb, axis=1, keepdims=True)
        for groups, cent, rad in (
            (fine_groups, index.fine_centroids, index.fine_radii),
            (coarse_groups, index.coarse_centroids, index.coarse_radii),
        ):
            best = _descendant_max(dots, groups)
            bound = qb @ cent.T + qnorm * rad[None, :]
            violations += int(np.count_nonzero(best > bound + tol))
    return violations


def covering_violations(index: HierarchicalIndex, tol: float = 1e-6) -> int:
    """Descendant chunks lying outside their node's covering radius."""
    reps = index.rep_keys
    bad = 0
    for c, members in enumerate(index.fine_members):
        if members:
            dist = np.linalg.norm(reps[members] - index.fine_centroids[c], axis=1)
            bad += int(np.count_nonzero(dist > index.fine_radii[c] + tol))
    for g in range(index.n_coarse):
        members = index.unit_chunks(g)
        if members:
            dist = np.linalg.norm(reps[members] - index.coarse_centroids[g], axis=1)
            bad += int(np.count_nonzero(dist > index.coarse_radii[g] + tol))
    return bad


@dataclass
class StabilityTrace:
    window: int = 32
    sets: list[frozenset] = field(default_factory=list)

    def jaccard_series(self) -> list[float]:
        return [jaccard(b, a) for a, b in zip(self.sets, self.sets[1:])]

    def window_hit_series(self) -> list[float]:
        return [window_hit(self.sets[max(0, t - self.window) : t], s) for t, s in enumerate(self.sets)]

    def empty_steps(self) -> int:
        return sum(1 for s in self.sets if not s)


@dataclass
class MetricReport:
    recall: float
    jaccard_series: list[float] = field(default_factory=list)
    window_hit_series: list[float] = field(default_factory=list)
    memory_ratio: float = 0.0
    scanned_centroids_series: list[int] = field(default_factory=list)
    vacuous_steps: int = 0

    def __post_init__(self) -> None:
        fractions = [self.recall, self.memory_ratio, *self.jaccard_series, *self.window_hit_series]
        if any(not 0.0 <= f <= 1.0 for f in fractions):
            raise ValueError("metric fractions must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def series_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "jaccard", "window_hit", "scanned_centroids"])
        n = max(len(self.jaccard_series) + 1, len(self.window_hit_series), len(self.scanned_centroids_series))
        for t in range(n):
            # jaccard compares step t with t-1, so it starts at step 1
            jac = self.jaccard_series[t - 1] if 1 <= t <= len(self.jaccard_series) else ""
            hit = self.window_hit_series[t] if t < len(self.window_hit_series) else ""
            scan = self.scanned_centroids_series[t] if t < len(self.scanned_centroids_series) else ""
            writer.writerow([t, jac, hit, scan])
        return buf.getvalue()
