"""Hierarchical retrieval over streaming key/value caches."""

from stratakv.chunker import ChunkPolicy, ChunkSpan, TokenRecord, classify_boundary, segment, segment_levels
from stratakv.evaluator import full_attention, jaccard, oracle_topk_tokens, recall_rate, window_hit
from stratakv.kv_index import (
    HierarchicalIndex,
    IndexConfig,
    TokenStore,
    build_index,
    chunk_representative,
    load_index,
    save_index,
    spherical_kmeans,
)
from stratakv.retriever import Budgets, RetrievalResult, query, retrieve, score_upper_bound, sparse_attention
from stratakv.streamer import StreamState, decode_step, graft_chunk, push_token
from stratakv.workload import WorkloadSpec, gen_clustered_workload, ingest_text

__all__ = [
    "Budgets",
    "ChunkPolicy",
    "ChunkSpan",
    "HierarchicalIndex",
    "IndexConfig",
    "RetrievalResult",
    "StreamState",
    "TokenRecord",
    "TokenStore",
    "WorkloadSpec",
    "build_index",
    "chunk_representative",
    "classify_boundary",
    "decode_step",
    "full_attention",
    "gen_clustered_workload",
    "graft_chunk",
    "ingest_text",
    "jaccard",
    "load_index",
    "oracle_topk_tokens",
    "push_token",
    "query",
    "recall_rate",
    "retrieve",
    "save_index",
    "score_upper_bound",
    "segment",
    "segment_levels",
    "sparse_attention",
    "spherical_kmeans",
    "window_hit",
]
