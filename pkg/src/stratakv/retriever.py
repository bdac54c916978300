"""Top-down prune-and-refine retrieval and exact attention over the survivors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from stratakv.kv_index import HierarchicalIndex


@dataclass(frozen=True)
class Budgets:
    """Retrieval budgets.

    With ``k_c`` set, exactly the top ``k_c`` fine clusters are kept;
    otherwise clusters are admitted in bound order up to ``token_budget``
    indexed tokens.  Sink and buffer tokens are free.
    """

    k_g: int = 8
    k_c: Optional[int] = None
    token_budget: int = 1024
    sink_size: int = 16

    def __post_init__(self) -> None:
        if self.k_g < 1:
            raise ValueError("k_g must be >= 1")
        if self.k_c is not None and self.k_c < 1:
            raise ValueError("k_c must be >= 1")
        if self.k_c is None and self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        if self.sink_size < 0:
            raise ValueError("sink_size must be >= 0")

    @property
    def mode(self) -> str:
        return "fixed_kc" if self.k_c is not None else "token_budget"


@dataclass
class RetrievalResult:
    selected_units: list[int]
    selected_clusters: list[int]
    active_token_ids: np.ndarray
    output: Optional[np.ndarray] = None
    scanned_centroids: int = 0
    degenerate: bool = False


def score_upper_bound(q: np.ndarray, centroid: np.ndarray, radius) -> np.ndarray | float:
    """Best inner product any point within ``radius`` of ``centroid`` can reach.

    ``centroid`` may be a stack of centroids with matching ``radius`` array.
    """
    q = np.asarray(q, dtype=float)
    return np.asarray(centroid) @ q + np.linalg.norm(q) * np.asarray(radius)


def select_topk(scores: Iterable[tuple[int, float]], k: int) -> list[int]:
    """Ids of the ``k`` largest scores, ordered by (score desc, id asc)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(scores, key=lambda p: (-p[1], p[0]))
    return [i for i, _ in ordered[:k]]


def _rank(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary
    return ids[np.lexsort((ids, -scores))]


def sparse_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Softmax(q.k / sqrt(d)) weighted sum of values, max-subtracted."""
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty active set")
    if keys.shape != values.shape or keys.shape[1] != len(q):
        raise ValueError(f"shape mismatch: q {np.shape(q)}, keys {keys.shape}, values {values.shape}")
    logits = keys @ np.asarray(q, dtype=float) / math.sqrt(keys.shape[1])
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return w @ values


def retrieve(
    index: HierarchicalIndex,
    q: np.ndarray,
    budgets: Budgets = Budgets(),
    buffer_ids: Sequence[int] = (),
) -> RetrievalResult:
    """Select fine clusters for ``q`` and gather the active token ids.

    Coarse units are ranked by their score upper bound and the best ``k_g``
    kept; the fine clusters beneath them are ranked the same way.  When the
    whole store fits the token budget nothing is pruned.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (index.dim,):
        raise ValueError(f"query must have dimension {index.dim}, got {q.shape}")
    total = len(index.store)
    buffer_ids = np.asarray(buffer_ids, dtype=np.int64)

    if budgets.mode == "token_budget" and total <= budgets.token_budget:
        return RetrievalResult(
            selected_units=list(range(index.n_coarse)),
            selected_clusters=list(range(index.n_fine)),
            active_token_ids=np.arange(total, dtype=np.int64),
            scanned_centroids=0,
            degenerate=True,
        )

    qn = np.linalg.norm(q)
    unit_ids = np.arange(index.n_coarse)
    unit_ub = index.coarse_centroids @ q + qn * index.coarse_radii
    units = _rank(unit_ids, unit_ub)[: budgets.k_g]

    cand = np.array(sorted(c for g in units for c in index.coarse_members[g]), dtype=np.int64)
    cand_ub = index.fine_centroids[cand] @ q + qn * index.fine_radii[cand]
    ranked = _rank(cand, cand_ub)
    if budgets.mode == "fixed_kc":
        clusters = ranked[: budgets.k_c]
    else:
        sizes = index.fine_tokens[ranked]
        fill = np.cumsum(sizes)
        n_keep = max(1, int(np.searchsorted(fill, budgets.token_budget, side="right")))
        clusters = ranked[:n_keep]

    sink = np.arange(min(budgets.sink_size, total), dtype=np.int64)
    active = np.union1d(np.union1d(sink, index.cluster_token_ids(clusters)), buffer_ids)
    return RetrievalResult(
        selected_units=[int(g) for g in units],
        selected_clusters=[int(c) for c in clusters],
        active_token_ids=active.astype(np.int64),
        scanned_centroids=int(index.n_coarse + len(cand)),
    )


def attend(index: HierarchicalIndex, q: np.ndarray, result: RetrievalResult) -> np.ndarray:
    ids = result.active_token_ids
    result.output = sparse_attention(q, index.store.keys[ids], index.store.values[ids])
    return result.output


def query(
    index: HierarchicalIndex,
    q: np.ndarray,
    budgets: Budgets = Budgets(),
    buffer_ids: Sequence[int] = (),
) -> RetrievalResult:
    """Retrieve and compute the sparse attention output in one call."""
    result = retrieve(index, q, budgets, buffer_ids)
    attend(index, q, result)
    return result
