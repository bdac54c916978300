"""Structure-aware segmentation of a token stream into boundary-aligned chunks.

Tokens accumulate greedily until a chunk reaches ``min_len``; the splitter
then looks ahead up to ``max_len`` for the strongest natural delimiter and
cuts right after it.  Without any delimiter in reach the chunk is cut at
exactly ``max_len``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Priority 1 is strongest.  Level 4 (whitespace) is matched by rule, not by list.
DEFAULT_SEPARATORS: tuple[tuple[int, tuple[str, ...]], ...] = (
    (1, ("\n\n", "---", "***", "```", "}", "]", ">")),
    (2, (".", "?", "!", "。", "？", "！", "\n")),
    (3, (",", ";", ":", "，", "；", "：", "、")),
    (4, (" ", "\t")),
)

WHITESPACE_LEVEL = 4
_HSPACE = " \t"


@dataclass
class TokenRecord:
    """One element of a KV stream.

    ``boundary`` lets synthetic streams (empty ``text``) mark a delimiter of
    a given priority level explicitly.
    """

    id: int
    text: str
    key: np.ndarray
    value: np.ndarray
    boundary: Optional[int] = None


@dataclass(frozen=True)
class ChunkPolicy:
    min_len: int = 8
    max_len: int = 16
    separator_table: tuple[tuple[int, tuple[str, ...]], ...] = DEFAULT_SEPARATORS

    def __post_init__(self) -> None:
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(
                f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}"
            )
        levels = [lvl for lvl, _ in self.separator_table]
        if levels != sorted(set(levels)) or any(not 1 <= lvl <= 4 for lvl in levels):
            raise ValueError(f"separator levels must be strictly increasing in 1..4: {levels}")


@dataclass(frozen=True)
class ChunkSpan:
    """Half-open token range ``[start, end)``.

    ``kind`` is ``"natural"``, ``"forced"`` or ``"tail"``; ``level`` is set
    only for natural spans.
    """

    start: int
    end: int
    kind: str
    level: Optional[int] = None

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"empty span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def boundary_kind(self) -> str:
        return f"natural({self.level})" if self.kind == "natural" else self.kind


def classify_boundary(
    text: str,
    table: Sequence[tuple[int, Sequence[str]]] = DEFAULT_SEPARATORS,
    prev_text: str = "",
) -> Optional[int]:
    """Return the strongest priority level ``text`` ends with, or None.

    For levels 1-3 the token is matched after stripping trailing spaces and
    tabs, and also after stripping all trailing whitespace, so ``"}\\n"``
    still counts as a closing brace.  Multi-character separators may straddle
    ``prev_text`` and ``text``.  Level 4 matches any token ending in a space
    or tab.
    """
    if not text:
        return None
    forms = {text.rstrip(_HSPACE), text.rstrip()}
    joined = prev_text + text
    joined_forms = {joined.rstrip(_HSPACE), joined.rstrip()} if prev_text else set()
    for level, seps in table:
        if level == WHITESPACE_LEVEL:
            if text[-1] in _HSPACE:
                return level
            continue
        for sep in seps:
            if any(f and f.endswith(sep) for f in forms):
                return level
            if len(sep) > 1 and any(
                f.endswith(sep) and len(f) - len(sep) < len(prev_text) for f in joined_forms
            ):
                return level
    return None


def boundary_levels(
    tokens: Sequence[TokenRecord], policy: ChunkPolicy = ChunkPolicy()
) -> list[Optional[int]]:
    """Priority level of a split placed right after each token."""
    levels: list[Optional[int]] = []
    prev = ""
    for tok in tokens:
        if tok.boundary is not None:
            levels.append(tok.boundary)
        else:
            levels.append(classify_boundary(tok.text, policy.separator_table, prev))
        prev = tok.text
    return levels


def next_split(
    levels: Sequence[Optional[int]],
    start: int,
    policy: ChunkPolicy,
    at_end: bool = True,
) -> ChunkSpan:
    """Choose where the chunk starting at ``start`` ends.

    A split after token ``p`` yields a chunk of length ``p - start + 1``; the
    look-ahead window is every length in ``[min_len, max_len]`` that the
    stream can supply.  ``at_end`` says the stream stops at ``len(levels)``;
    otherwise the caller guarantees ``max_len`` tokens are available.
    """
    n = len(levels)
    remaining = n - start
    lo = start + policy.min_len - 1
    hi = min(start + policy.max_len, n) - 1
    best_pos, best_level = -1, None
    for pos in range(lo, hi + 1):
        lvl = levels[pos]
        # <= so that among equal levels the rightmost candidate wins
        if lvl is not None and (best_level is None or lvl <= best_level):
            best_pos, best_level = pos, lvl
    if best_level is not None:
        return ChunkSpan(start, best_pos + 1, "natural", best_level)
    if remaining > policy.max_len or (remaining == policy.max_len and not at_end):
        return ChunkSpan(start, start + policy.max_len, "forced")
    if not at_end:
        raise ValueError(f"need {policy.max_len} tokens to split, have {remaining}")
    return ChunkSpan(start, n, "tail")


def segment(tokens: Sequence[TokenRecord], policy: ChunkPolicy = ChunkPolicy()) -> list[ChunkSpan]:
    """Tile ``tokens`` with chunk spans, in order."""
    if len(tokens) == 0:
        raise ValueError("empty stream")
    return segment_levels(boundary_levels(tokens, policy), policy)


def segment_levels(levels: Sequence[Optional[int]], policy: ChunkPolicy = ChunkPolicy()) -> list[ChunkSpan]:
    """Segment from precomputed per-token boundary levels."""
    if len(levels) == 0:
        raise ValueError("empty stream")
    spans = []
    start = 0
    while start < len(levels):
        span = next_split(levels, start, policy)
        spans.append(span)
        start = span.end
    return spans


def fixed_size_spans(n_tokens: int, size: int) -> list[ChunkSpan]:
    if n_tokens < 1:
        raise ValueError("empty stream")
    spans = [ChunkSpan(s, s + size, "forced") for s in range(0, n_tokens - size + 1, size)]
    done = spans[-1].end if spans else 0
    if done < n_tokens:
        spans.append(ChunkSpan(done, n_tokens, "tail"))
    return spans
