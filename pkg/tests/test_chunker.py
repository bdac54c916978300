import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratakv.chunker import (
    DEFAULT_SEPARATORS,
    ChunkPolicy,
    ChunkSpan,
    TokenRecord,
    boundary_levels,
    classify_boundary,
    fixed_size_spans,
    next_split,
    segment,
    segment_levels,
)


def _tokens(texts):
    z = np.zeros(2)
    return [TokenRecord(i, t, z, z) for i, t in enumerate(texts)]


def _flagged(n, flags):
    z = np.ones(2)
    return [TokenRecord(i, "", z, z, flags.get(i)) for i in range(n)]


@pytest.mark.parametrize(
    "text,level",
    [
        ("}\n", 1),
        ("word.", 2),
        ("word", None),
        ("\n\n", 1),
        ("```", 1),
        ("end?", 2),
        ("句。", 2),
        ("a,", 3),
        ("a、", 3),
        ("word ", 4),
        ("word\t", 4),
        ("word. ", 2),
        ("x:\t", 3),
        ("", None),
    ],
)
def test_classify_boundary(text, level):
    assert classify_boundary(text, DEFAULT_SEPARATORS) == level


def test_multichar_separator_across_tokens():
    assert classify_boundary("\n", DEFAULT_SEPARATORS) == 2
    assert classify_boundary("\n", DEFAULT_SEPARATORS, prev_text="a\n") == 1
    assert classify_boundary("-", DEFAULT_SEPARATORS, prev_text="--") == 1
    assert classify_boundary("``", DEFAULT_SEPARATORS, prev_text="`") == 1
    # the separator must actually straddle into the previous token
    assert classify_boundary("x", DEFAULT_SEPARATORS, prev_text="---") is None


def test_natural_split_inside_window():
    flags = {10: 1}
    spans = segment(_flagged(20, flags), ChunkPolicy(8, 16))
    assert [(s.start, s.end, s.boundary_kind) for s in spans] == [(0, 11, "natural(1)"), (11, 20, "tail")]


def test_boundary_below_min_len_ignored():
    spans = segment(_flagged(20, {4: 1}), ChunkPolicy(8, 16))
    assert [(s.start, s.end, s.kind) for s in spans] == [(0, 16, "forced"), (16, 20, "tail")]


def test_rightmost_among_equal_priority():
    spans = segment(_flagged(30, {9: 2, 13: 2}), ChunkPolicy(8, 16))
    assert spans[0].end == 14


def test_stronger_level_beats_rightmost():
    spans = segment(_flagged(30, {9: 1, 13: 2, 14: 3}), ChunkPolicy(8, 16))
    assert (spans[0].end, spans[0].level) == (10, 1)


def test_window_edges():
    # split after position 7 gives length 8 = min_len, after 15 gives 16 = max_len
    assert segment(_flagged(30, {7: 3}), ChunkPolicy(8, 16))[0].end == 8
    assert segment(_flagged(30, {15: 3}), ChunkPolicy(8, 16))[0].end == 16
    assert segment(_flagged(30, {16: 1}), ChunkPolicy(8, 16))[0].kind == "forced"


def test_empty_stream():
    with pytest.raises(ValueError, match="empty stream"):
        segment([], ChunkPolicy())


def test_policy_validation():
    with pytest.raises(ValueError):
        ChunkPolicy(0, 4)
    with pytest.raises(ValueError):
        ChunkPolicy(9, 8)


def test_streaming_split_needs_full_window():
    levels = [None] * 16
    assert next_split(levels, 0, ChunkPolicy(8, 16), at_end=False).kind == "forced"
    assert next_split(levels, 0, ChunkPolicy(8, 16), at_end=True).kind == "tail"
    with pytest.raises(ValueError):
        next_split([None] * 10, 0, ChunkPolicy(8, 16), at_end=False)


def test_text_tokens():
    words = "one two three four five six seven eight. nine ten eleven twelve thirteen".split(" ")
    toks = _tokens([w + " " for w in words[:-1]] + [words[-1]])
    spans = segment(toks, ChunkPolicy(4, 10))
    # "eight. " ends a sentence at length 8; whitespace boundaries are weaker
    assert spans[0].end == 8 and spans[0].level == 2


levels_strategy = st.lists(st.sampled_from([None, None, None, 1, 2, 3, 4]), min_size=1, max_size=200)


@st.composite
def policies(draw):
    lo = draw(st.integers(1, 12))
    hi = draw(st.integers(lo, 24))
    return ChunkPolicy(lo, hi)


@settings(max_examples=300, deadline=None)
@given(levels_strategy, policies())
def test_segment_properties(levels, policy):
    spans = segment_levels(levels, policy)
    # reconstruction
    ids = [i for s in spans for i in range(s.start, s.end)]
    assert ids == list(range(len(levels)))
    # size bounds
    for s in spans[:-1]:
        assert policy.min_len <= len(s) <= policy.max_len
        assert s.kind != "tail"
    assert 1 <= len(spans[-1]) <= policy.max_len
    # boundary dominance, re-scanning each window
    for s in spans:
        lo = s.start + policy.min_len - 1
        hi = min(s.start + policy.max_len, len(levels)) - 1
        window = [levels[p] for p in range(lo, hi + 1) if levels[p] is not None]
        if s.kind == "natural":
            assert levels[s.end - 1] == s.level
            assert all(lvl >= s.level for lvl in window)
            right = [p for p in range(s.end, hi + 1) if levels[p] == s.level]
            assert not right
        else:
            assert not window
    # determinism
    assert segment_levels(list(levels), policy) == spans


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), policies())
def test_separator_free_is_fixed_size(n, policy):
    spans = segment_levels([None] * n, policy)
    assert [(s.start, s.end) for s in spans] == [(s.start, s.end) for s in fixed_size_spans(n, policy.max_len)]


def test_boundary_flags_override_text():
    z = np.zeros(2)
    toks = [TokenRecord(0, "a.", z, z), TokenRecord(1, "b", z, z, 1)]
    assert boundary_levels(toks) == [2, 1]


def test_span_validation():
    with pytest.raises(ValueError):
        ChunkSpan(3, 3, "forced")
