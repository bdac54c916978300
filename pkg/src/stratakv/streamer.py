"""Lazy index maintenance while decoding.

New tokens sit in a buffer until ``max_len`` of them are present; the
chunker then cuts one boundary-aligned chunk off the front, which is grafted
onto its nearest fine cluster without re-clustering.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from stratakv.chunker import ChunkPolicy, TokenRecord, boundary_levels, next_split
from stratakv.kv_index import HierarchicalIndex, chunk_representative
from stratakv.retriever import Budgets, RetrievalResult, retrieve, sparse_attention

GRAFT_SCOPES = ("scoped", "full")


@dataclass
class GraftReport:
    chunk_id: int
    cluster_id: int
    unit_id: int
    centroid_shift: float
    fine_radius: float
    coarse_radius: float
    distance_computations: int


@dataclass
class StreamState:
    """Mutable index plus the unindexed token buffer.

    Grafts mutate ``index`` in place; callers must not run retrievals
    concurrently with ``push_token``/``decode_step``.
    """

    index: HierarchicalIndex
    policy: ChunkPolicy = field(default_factory=ChunkPolicy)
    graft_scope: str = "scoped"
    fixed_size: bool = False
    max_buffer: int = 128
    window: int = 32
    buffer: list[TokenRecord] = field(default_factory=list)
    history: collections.deque = field(default=None)
    grafts: list[GraftReport] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.graft_scope not in GRAFT_SCOPES:
            raise ValueError(f"graft_scope must be one of {GRAFT_SCOPES}")
        if self.max_buffer < self.policy.max_len:
            raise ValueError("max_buffer must be at least the chunk max_len")
        if self.history is None:
            # one extra slot so the previous ``window`` sets survive the current append
            self.history = collections.deque(maxlen=self.window + 1)
        indexed = self.index.n_indexed_tokens
        if len(self.index.store) != indexed:
            # tail tokens stored but not chunked (e.g. restored state) go back to the buffer
            self.buffer = self.index.store.records(indexed)

    @property
    def next_id(self) -> int:
        return len(self.index.store)

    @property
    def buffer_ids(self) -> list[int]:
        return [t.id for t in self.buffer]


def push_token(state: StreamState, token: TokenRecord) -> Optional[int]:
    """Append a token; when the buffer fills, graft one chunk and return its id."""
    if token.id != state.next_id:
        raise ValueError(f"non-sequential token id {token.id}, expected {state.next_id}")
    state.index.store.append(token)
    state.buffer.append(token)
    if len(state.buffer) < state.policy.max_len:
        return None
    if state.fixed_size:
        cut = state.policy.max_len
    else:
        levels = boundary_levels(state.buffer, state.policy)
        span = next_split(levels, 0, state.policy, at_end=False)
        cut = span.end
    chunk_tokens, state.buffer = state.buffer[:cut], state.buffer[cut:]
    keys = np.stack([t.key for t in chunk_tokens])
    rep = chunk_representative(keys, state.index.config.pooling)
    chunk_id = state.index.append_chunk(chunk_tokens[0].id, chunk_tokens[-1].id + 1, rep)
    state.grafts.append(graft_chunk(state, chunk_id))
    return chunk_id


def _nearest_cluster(state: StreamState, rep: np.ndarray) -> tuple[int, int]:
    index = state.index
    if state.graft_scope == "scoped":
        unit_sims = index.coarse_centroids @ rep
        unit = int(np.argmax(unit_sims))
        members = index.coarse_members[unit]
        if members:
            members = np.array(members)
            # member lists are ascending, so argmax ties resolve to the smaller id
            sims = index.fine_centroids[members] @ rep
            return int(members[np.argmax(sims)]), index.n_coarse + len(members)
        computations = index.n_coarse
    else:
        computations = 0
    sims = index.fine_centroids @ rep
    return int(np.argmax(sims)), computations + index.n_fine


def graft_chunk(state: StreamState, chunk_id: int) -> GraftReport:
    """Attach a registered chunk to its nearest fine cluster.

    The fine centroid moves to the count-weighted normalized mean and its
    radius grows by the centroid shift, which keeps every earlier member
    covered.  The coarse centroid stays frozen and only its radius grows.
    """
    index = state.index
    if index.n_fine == 0:
        raise ValueError("cannot graft onto an empty index")
    rep = index.rep_keys[chunk_id]
    c, computations = _nearest_cluster(state, rep)
    g = int(index.cluster_unit[c])

    n = len(index.fine_members[c])
    mu = index.fine_centroids[c]
    moved = n * mu + rep
    norm = np.linalg.norm(moved)
    mu_new = moved / norm if norm > 1e-12 else mu.copy()
    shift = float(np.linalg.norm(mu_new - mu))
    r_fine = max(index.fine_radii[c] + shift, float(np.linalg.norm(rep - mu_new)))
    index.fine_centroids[c] = mu_new
    index.fine_radii[c] = r_fine
    index.fine_members[c].append(chunk_id)
    index.fine_tokens[c] += index.chunk_ends[chunk_id] - index.chunk_starts[chunk_id]
    index.chunk_cluster[chunk_id] = c

    r_coarse = max(float(index.coarse_radii[g]), float(np.linalg.norm(rep - index.coarse_centroids[g])))
    index.coarse_radii[g] = r_coarse
    return GraftReport(chunk_id, c, g, shift, r_fine, r_coarse, computations)


def decode_step(
    state: StreamState,
    q: np.ndarray,
    budgets: Budgets = Budgets(),
    new_token: Optional[TokenRecord] = None,
) -> tuple[np.ndarray, RetrievalResult]:
    """Attend with ``q`` over the retrieved set, then index the step's KV pair."""
    result = retrieve(state.index, q, budgets, state.buffer_ids)
    ids = result.active_token_ids
    store = state.index.store
    result.output = sparse_attention(q, store.keys[ids], store.values[ids])
    state.history.append(frozenset(result.selected_clusters))
    if new_token is not None:
        push_token(state, new_token)
    return result.output, result
