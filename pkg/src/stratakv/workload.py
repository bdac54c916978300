"""Synthetic KV workloads and text ingestion.

Stand-ins for model-produced keys: the clustered generator draws keys around
a handful of blob centres on the sphere, with per-sentence sub-directions so
that finer clustering has something to find.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from stratakv.chunker import TokenRecord
from stratakv.kv_index import TokenStore

WORKLOAD_KINDS = ("clustered_synthetic", "text_corpus")

SENTENCE_LEVEL = 2
PARAGRAPH_LEVEL = 1


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "clustered_synthetic"
    n_tokens: int = 8192
    d: int = 128
    n_blobs: Optional[int] = None
    tokens_per_blob: int = 1024
    blob_concentration: float = 2.0
    query_count: int = 64
    query_locality: float = 0.9
    seed: int = 0
    sentence_len: int = 12
    sentences_per_paragraph: int = 4

    def __post_init__(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise ValueError(f"kind must be one of {WORKLOAD_KINDS}")
        if self.n_tokens < 1 or self.d < 2 or self.query_count < 0:
            raise ValueError("need n_tokens >= 1, d >= 2, query_count >= 0")
        if (self.n_blobs is not None and self.n_blobs < 1) or self.tokens_per_blob < 1:
            raise ValueError("n_blobs and tokens_per_blob must be >= 1")
        if not 0.0 <= self.query_locality <= 1.0:
            raise ValueError("query_locality must lie in [0, 1]")
        if not self.blob_concentration > 0:
            raise ValueError("blob_concentration must be positive (inf for no noise)")
        if self.sentence_len < 2 or self.sentences_per_paragraph < 1 or self.seed < 0:
            raise ValueError("sentence_len >= 2, sentences_per_paragraph >= 1, seed >= 0 required")

    @property
    def blobs(self) -> int:
        """Explicit ``n_blobs``, else one topic per ``tokens_per_blob`` tokens."""
        if self.n_blobs is not None:
            return self.n_blobs
        return max(1, self.n_tokens // self.tokens_per_blob)


@dataclass
class Workload:
    keys: np.ndarray
    values: np.ndarray
    boundaries: list[Optional[int]]
    queries: np.ndarray
    centers: np.ndarray
    token_blob: np.ndarray
    query_blob: np.ndarray
    texts: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def store(self, n: Optional[int] = None) -> TokenStore:
        n = len(self) if n is None else n
        texts = self.texts[:n] if self.texts else None
        return TokenStore.from_arrays(self.keys[:n], self.values[:n], texts, self.boundaries[:n])

    def record(self, i: int) -> TokenRecord:
        text = self.texts[i] if self.texts else ""
        return TokenRecord(i, text, self.keys[i], self.values[i], self.boundaries[i])

    def records(self, start: int = 0, end: Optional[int] = None) -> list[TokenRecord]:
        end = len(self) if end is None else end
        return [self.record(i) for i in range(start, end)]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _noise(rng: np.random.Generator, shape, d: int, concentration: float) -> np.ndarray:
    # per-row norm is about 1/concentration
    if math.isinf(concentration):
        return np.zeros(shape)
    return rng.standard_normal(shape) / (math.sqrt(d) * concentration)


def gen_clustered_workload(spec: WorkloadSpec) -> Workload:
    """Keys grouped into paragraphs, each paragraph drawn from one blob.

    Sentence lengths vary in ``sentence_len +- 3``; the last token of each
    sentence carries an explicit level-2 boundary flag and the last token of
    each paragraph a level-1 flag.
    """
    if spec.kind != "clustered_synthetic":
        raise ValueError("gen_clustered_workload needs kind='clustered_synthetic'")
    rng = np.random.default_rng(spec.seed)
    d, n, kappa = spec.d, spec.n_tokens, spec.blob_concentration
    n_blobs = spec.blobs
    centers = _unit(rng.standard_normal((n_blobs, d)))

    keys = np.empty((n, d))
    token_blob = np.empty(n, dtype=np.int64)
    boundaries: list[Optional[int]] = [None] * n
    pos = 0
    jitter = min(3, spec.sentence_len - 1)
    while pos < n:
        blob = int(rng.integers(n_blobs))
        for s in range(spec.sentences_per_paragraph):
            if pos >= n:
                break
            length = int(spec.sentence_len + rng.integers(-jitter, jitter + 1))
            end = min(pos + length, n)
            sentence_dir = _unit(centers[blob] + _noise(rng, d, d, kappa))
            keys[pos:end] = _unit(sentence_dir + _noise(rng, (end - pos, d), d, kappa))
            token_blob[pos:end] = blob
            last = s == spec.sentences_per_paragraph - 1
            boundaries[end - 1] = PARAGRAPH_LEVEL if last else SENTENCE_LEVEL
            pos = end
    values = rng.standard_normal((n, d))

    m = spec.query_count
    query_blob = np.full(m, -1, dtype=np.int64)
    queries = np.empty((m, d))
    for i in range(m):
        if rng.random() < spec.query_locality:
            b = int(rng.integers(n_blobs))
            query_blob[i] = b
            direction = _unit(centers[b] + _noise(rng, d, d, kappa))
        else:
            direction = _unit(rng.standard_normal(d))
        queries[i] = direction * math.sqrt(d) * rng.uniform(0.5, 1.5)
    return Workload(keys, values, boundaries, queries, centers, token_blob, query_blob)


_TOKEN_RE = re.compile(r"\S+\s*")


def _hashed_unit(label: str, d: int) -> np.ndarray:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return _unit(rng.standard_normal(d))


def ingest_text(path, seed: int = 0, d: int = 64, paragraph_weight: float = 2.0) -> Workload:
    """Tokenize a UTF-8 file on whitespace, keeping trailing whitespace on tokens.

    Each key mixes a hash-derived direction for the word with a direction
    shared by its paragraph (blocks separated by blank lines).
    """
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path} is not valid UTF-8: {exc}") from exc
    texts = _TOKEN_RE.findall(text)
    if not texts:
        raise ValueError(f"{path} contains no tokens")

    n = len(texts)
    keys = np.empty((n, d))
    para = np.empty(n, dtype=np.int64)
    p = 0
    for i, tok in enumerate(texts):
        para[i] = p
        word = _hashed_unit(f"{seed}:w:{tok.strip().lower()}", d)
        bias = _hashed_unit(f"{seed}:p:{p}", d)
        keys[i] = _unit(word + paragraph_weight * bias)
        if "\n\n" in tok[len(tok.rstrip()) :]:
            p += 1
    values = np.random.default_rng(seed).standard_normal((n, d))
    return Workload(
        keys=keys,
        values=values,
        boundaries=[None] * n,
        queries=np.empty((0, d)),
        centers=np.stack([_hashed_unit(f"{seed}:p:{i}", d) for i in range(p + 1)]),
        token_blob=para,
        query_blob=np.empty(0, dtype=np.int64),
        texts=texts,
    )
