"""Three-tier pyramid over chunk keys: coarse units -> fine clusters -> chunks.

Every node keeps a centroid and a covering radius measured over the
representative keys of all chunks below it, which is what makes the
retriever's score upper bound sound at both tiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from stratakv.chunker import ChunkSpan, TokenRecord

POOLING_MODES = ("mean", "max")


@dataclass(frozen=True)
class IndexConfig:
    avg_chunks_per_cluster: float = 2.0
    max_coarse_units: int = 64
    kmeans_iters: int = 10
    pooling: str = "mean"
    seed: int = 0
    element_bytes: int = 2

    def __post_init__(self) -> None:
        if self.avg_chunks_per_cluster <= 0:
            raise ValueError("avg_chunks_per_cluster must be positive")
        if self.max_coarse_units < 1 or self.kmeans_iters < 1 or self.element_bytes < 1:
            raise ValueError("max_coarse_units, kmeans_iters and element_bytes must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


class TokenStore:
    """Append-only flat store of token keys, values and surface texts."""

    def __init__(self, dim: int, capacity: int = 1024):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim
        self._keys = np.empty((max(capacity, 1), dim))
        self._values = np.empty((max(capacity, 1), dim))
        self.texts: list[str] = []
        self.boundaries: list[Optional[int]] = []

    @classmethod
    def from_records(cls, tokens: Sequence[TokenRecord]) -> "TokenStore":
        if not tokens:
            raise ValueError("empty stream")
        store = cls(len(tokens[0].key), capacity=len(tokens))
        for tok in tokens:
            store.append(tok)
        return store

    @classmethod
    def from_arrays(cls, keys: np.ndarray, values: np.ndarray, texts=None, boundaries=None):
        keys = np.asarray(keys, dtype=float)
        values = np.asarray(values, dtype=float)
        if keys.ndim != 2 or keys.shape != values.shape or keys.shape[0] == 0:
            raise ValueError(f"keys/values must be matching non-empty (N, d), got {keys.shape}, {values.shape}")
        n = keys.shape[0]
        store = cls(keys.shape[1], capacity=n)
        store._keys[:n] = keys
        store._values[:n] = values
        store.texts = list(texts) if texts is not None else [""] * n
        store.boundaries = list(boundaries) if boundaries is not None else [None] * n
        return store

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: len(self)]

    @property
    def values(self) -> np.ndarray:
        return self._values[: len(self)]

    def append(self, tok: TokenRecord) -> None:
        n = len(self)
        if tok.id != n:
            raise ValueError(f"non-sequential token id {tok.id}, expected {n}")
        key = np.asarray(tok.key, dtype=float)
        value = np.asarray(tok.value, dtype=float)
        if key.shape != (self.dim,) or value.shape != (self.dim,):
            raise ValueError(f"token {tok.id}: key/value must have dimension {self.dim}")
        if n == self._keys.shape[0]:
            self._keys = np.concatenate([self._keys, np.empty_like(self._keys)])
            self._values = np.concatenate([self._values, np.empty_like(self._values)])
        self._keys[n] = key
        self._values[n] = value
        self.texts.append(tok.text)
        self.boundaries.append(tok.boundary)

    def record(self, i: int) -> TokenRecord:
        return TokenRecord(i, self.texts[i], self._keys[i].copy(), self._values[i].copy(), self.boundaries[i])

    def records(self, start: int = 0, end: Optional[int] = None) -> list[TokenRecord]:
        end = len(self) if end is None else end
        return [self.record(i) for i in range(start, end)]


def chunk_representative(keys: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """Pool a chunk's token keys and project the result onto the unit sphere."""
    keys = np.asarray(keys, dtype=float)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty key list")
    if pooling == "mean":
        pooled = keys.mean(axis=0)
    elif pooling == "max":
        pooled = keys.max(axis=0)
    else:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    norm = np.linalg.norm(pooled)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("zero norm after pooling")
    return pooled / norm


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    objective_history: list[float]
    dot_products: int


def spherical_kmeans(points: np.ndarray, k: int, iters: int = 10, seed: int = 0) -> KMeansResult:
    """Lloyd iterations on the unit sphere with inner-product assignment.

    Initial centroids are a seeded sample of ``k`` distinct points.  A cluster
    left empty by an assignment pass takes the point that is farthest (lowest
    inner product) from its own centroid, among clusters with more than one
    member.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    init = np.sort(rng.choice(n, size=k, replace=False))
    centroids = points[init].copy()
    history: list[float] = []
    dots = 0
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        sims = points @ centroids.T
        dots += n * k
        assignment = np.argmax(sims, axis=1)
        best = sims[np.arange(n), assignment]
        _repair_empty(assignment, best, k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 1e-12
        centroids[ok] = sums[ok] / norms[ok, None]
        history.append(float(np.einsum("ij,ij->", points, centroids[assignment])))
    return KMeansResult(centroids, assignment, history, dots)


def _repair_empty(assignment: np.ndarray, best: np.ndarray, k: int) -> None:
    counts = np.bincount(assignment, minlength=k)
    for c in np.flatnonzero(counts == 0):
        donors = counts[assignment] > 1
        cand = np.flatnonzero(donors)
        # lowest similarity first; stable argsort breaks ties toward smaller id
        victim = cand[np.argsort(best[cand], kind="stable")[0]]
        counts[assignment[victim]] -= 1
        assignment[victim] = c
        best[victim] = 1.0
        counts[c] = 1


@dataclass
class HierarchicalIndex:
    """Chunks, fine clusters and coarse units over a flat token store.

    Membership is stored as Python lists so streaming grafts can append;
    centroids and radii are stacked arrays for vectorised scoring.
    """

    store: TokenStore
    config: IndexConfig
    chunk_starts: list[int]
    chunk_ends: list[int]
    rep_buffer: np.ndarray
    fine_centroids: np.ndarray
    fine_radii: np.ndarray
    fine_members: list[list[int]]
    fine_tokens: np.ndarray
    coarse_centroids: np.ndarray
    coarse_radii: np.ndarray
    coarse_members: list[list[int]]
    chunk_cluster: list[int]
    cluster_unit: np.ndarray
    build_stats: dict = field(default_factory=dict)

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_starts)

    @property
    def rep_keys(self) -> np.ndarray:
        return self.rep_buffer[: self.n_chunks]

    @property
    def n_fine(self) -> int:
        return self.fine_centroids.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.coarse_centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.store.dim

    @property
    def n_indexed_tokens(self) -> int:
        return self.chunk_ends[-1] if self.chunk_ends else 0

    def fine_member_counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.fine_members], dtype=np.int64)

    def chunk_token_ids(self, chunk_ids: Sequence[int]) -> np.ndarray:
        parts = [np.arange(self.chunk_starts[j], self.chunk_ends[j]) for j in chunk_ids]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def cluster_token_ids(self, cluster_ids: Sequence[int]) -> np.ndarray:
        return self.chunk_token_ids([j for c in cluster_ids for j in self.fine_members[c]])

    def unit_chunks(self, unit: int) -> list[int]:
        return [j for c in self.coarse_members[unit] for j in self.fine_members[c]]

    def append_chunk(self, start: int, end: int, rep_key: np.ndarray) -> int:
        """Register a chunk (not yet assigned to a cluster); returns its id."""
        if self.chunk_ends and start != self.chunk_ends[-1]:
            raise ValueError(f"chunk [{start}, {end}) does not continue at {self.chunk_ends[-1]}")
        j = self.n_chunks
        if j == self.rep_buffer.shape[0]:
            grown = np.empty((max(2 * j, 16), self.dim))
            grown[:j] = self.rep_buffer[:j]
            self.rep_buffer = grown
        self.rep_buffer[j] = rep_key
        self.chunk_starts.append(start)
        self.chunk_ends.append(end)
        self.chunk_cluster.append(-1)
        return j

    def spans(self) -> list[tuple[int, int]]:
        return list(zip(self.chunk_starts, self.chunk_ends))


def _covering_radius(center: np.ndarray, members: np.ndarray) -> float:
    if members.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(members - center, axis=1).max())


def fine_cluster_count(n_chunks: int, avg_chunks_per_cluster: float) -> int:
    return min(n_chunks, max(1, math.ceil(n_chunks / avg_chunks_per_cluster)))


def coarse_unit_count(n_fine: int, max_coarse_units: int) -> int:
    return min(max_coarse_units, n_fine, max(1, math.ceil(math.sqrt(n_fine))))


def build_index(
    tokens, spans: Sequence[ChunkSpan] | Sequence[tuple[int, int]], cfg: IndexConfig = IndexConfig()
) -> HierarchicalIndex:
    """Pool chunk keys, cluster them twice, and record covering radii.

    ``tokens`` is a TokenRecord sequence or a TokenStore.
    """
    if not spans:
        raise ValueError("empty spans")
    store = tokens if isinstance(tokens, TokenStore) else TokenStore.from_records(tokens)
    bounds = [(s.start, s.end) if isinstance(s, ChunkSpan) else tuple(s) for s in spans]
    pos = 0
    for s, e in bounds:
        if s != pos or e <= s:
            raise ValueError(f"spans must tile the tokens; bad span [{s}, {e}) at {pos}")
        pos = e
    if pos != len(store):
        raise ValueError(f"spans cover {pos} tokens, store has {len(store)}")

    keys = store.keys
    rep = np.stack([chunk_representative(keys[s:e], cfg.pooling) for s, e in bounds])
    m = rep.shape[0]
    n_fine = fine_cluster_count(m, cfg.avg_chunks_per_cluster)
    fine = spherical_kmeans(rep, n_fine, cfg.kmeans_iters, cfg.seed)
    fine_members = [[] for _ in range(n_fine)]
    for j, c in enumerate(fine.assignment):
        fine_members[c].append(j)
    fine_radii = np.array(
        [_covering_radius(fine.centroids[c], rep[fine_members[c]]) for c in range(n_fine)]
    )
    lengths = np.array([e - s for s, e in bounds], dtype=np.int64)
    fine_tokens = np.bincount(fine.assignment, weights=lengths, minlength=n_fine).astype(np.int64)

    n_coarse = coarse_unit_count(n_fine, cfg.max_coarse_units)
    coarse = spherical_kmeans(fine.centroids, n_coarse, cfg.kmeans_iters, cfg.seed + 1)
    coarse_members = [[] for _ in range(n_coarse)]
    for c, g in enumerate(coarse.assignment):
        coarse_members[g].append(c)
    chunk_unit = coarse.assignment[fine.assignment]
    coarse_radii = np.array(
        [_covering_radius(coarse.centroids[g], rep[chunk_unit == g]) for g in range(n_coarse)]
    )

    stats = {
        "kmeans_dot_products": fine.dot_products + coarse.dot_products,
        "centroid_updates": cfg.kmeans_iters * (n_fine + n_coarse),
        "fine_objective": fine.objective_history,
        "coarse_objective": coarse.objective_history,
    }
    return HierarchicalIndex(
        store=store,
        config=cfg,
        chunk_starts=[s for s, _ in bounds],
        chunk_ends=[e for _, e in bounds],
        rep_buffer=rep,
        fine_centroids=fine.centroids,
        fine_radii=fine_radii,
        fine_members=fine_members,
        fine_tokens=fine_tokens,
        coarse_centroids=coarse.centroids,
        coarse_radii=coarse_radii,
        coarse_members=coarse_members,
        chunk_cluster=[int(c) for c in fine.assignment],
        cluster_unit=coarse.assignment.astype(np.int64),
        build_stats=stats,
    )


def index_memory_bytes(index: HierarchicalIndex, element_bytes: Optional[int] = None) -> tuple[int, int, float]:
    """Byte footprint of the index against the full K and V tensors.

    Counts representative keys, fine and coarse centroids, radii and the
    member id lists, all at ``element_bytes`` per element.
    """
    w = index.config.element_bytes if element_bytes is None else element_bytes
    d = index.dim
    m, l, p = index.n_chunks, index.n_fine, index.n_coarse
    vectors = (m + l + p) * d
    radii = l + p
    ids = m + l
    index_bytes = w * (vectors + radii + ids)
    kv_bytes = w * 2 * len(index.store) * d
    return index_bytes, kv_bytes, index_bytes / kv_bytes


def _flatten(lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.cumsum([0] + [len(x) for x in lists]).astype(np.int64)
    flat = np.array([v for x in lists for v in x], dtype=np.int64)
    return flat, offsets


def _unflatten(flat: np.ndarray, offsets: np.ndarray) -> list[list[int]]:
    return [flat[a:b].tolist() for a, b in zip(offsets[:-1], offsets[1:])]


def save_index(index: HierarchicalIndex, path) -> None:
    """Write the index and its token store to an ``.npz`` archive."""
    import json

    fine_flat, fine_off = _flatten(index.fine_members)
    coarse_flat, coarse_off = _flatten(index.coarse_members)
    cfg = {k: getattr(index.config, k) for k in index.config.__dataclass_fields__}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            keys=index.store.keys,
            values=index.store.values,
            texts=np.array(json.dumps(index.store.texts)),
            boundaries=np.array([-1 if b is None else b for b in index.store.boundaries], dtype=np.int64),
            chunk_starts=np.array(index.chunk_starts, dtype=np.int64),
            chunk_ends=np.array(index.chunk_ends, dtype=np.int64),
            rep_keys=index.rep_keys,
            fine_centroids=index.fine_centroids,
            fine_radii=index.fine_radii,
            fine_flat=fine_flat,
            fine_off=fine_off,
            fine_tokens=index.fine_tokens,
            coarse_centroids=index.coarse_centroids,
            coarse_radii=index.coarse_radii,
            coarse_flat=coarse_flat,
            coarse_off=coarse_off,
            chunk_cluster=np.array(index.chunk_cluster, dtype=np.int64),
            cluster_unit=index.cluster_unit,
            config=np.array(json.dumps(cfg, sort_keys=True)),
        )


def load_index(path) -> HierarchicalIndex:
    import json

    with np.load(path, allow_pickle=False) as z:
        boundaries = [None if b < 0 else int(b) for b in z["boundaries"]]
        store = TokenStore.from_arrays(z["keys"], z["values"], json.loads(str(z["texts"])), boundaries)
        return HierarchicalIndex(
            store=store,
            config=IndexConfig(**json.loads(str(z["config"]))),
            chunk_starts=z["chunk_starts"].tolist(),
            chunk_ends=z["chunk_ends"].tolist(),
            rep_buffer=z["rep_keys"].copy(),
            fine_centroids=z["fine_centroids"].copy(),
            fine_radii=z["fine_radii"].copy(),
            fine_members=_unflatten(z["fine_flat"], z["fine_off"]),
            fine_tokens=z["fine_tokens"].copy(),
            coarse_centroids=z["coarse_centroids"].copy(),
            coarse_radii=z["coarse_radii"].copy(),
            coarse_members=_unflatten(z["coarse_flat"], z["coarse_off"]),
            chunk_cluster=z["chunk_cluster"].tolist(),
            cluster_unit=z["cluster_unit"].copy(),
        )
