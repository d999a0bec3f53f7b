import random
import struct

import pytest
from hypothesis import given, strategies as st

from dpcache.core import (
    FNV_OFFSET_BASIS,
    CacheKey,
    ModelMeta,
    PromptLayout,
    RangeLabel,
    cache_key,
    canonical_bytes,
    derive_ranges,
    fnv1a_64,
    prefix_keys,
)
from dpcache.errors import InvalidInput

from conftest import random_layout


def test_fnv_offset_basis_for_empty_input():
    assert fnv1a_64(b"") == 14695981039346656037 == FNV_OFFSET_BASIS


@pytest.mark.parametrize(
    "data, expected",
    [
        # published FNV-1a 64 test vectors
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ],
)
def test_fnv_known_vectors(data, expected):
    assert fnv1a_64(data) == expected


def test_fnv_continues_streaming():
    assert fnv1a_64(b"bar", fnv1a_64(b"foo")) == fnv1a_64(b"foobar")


def test_canonical_bytes_hand_serialized():
    m = ModelMeta("a", (), vocab_size=10)
    assert canonical_bytes(m, [1]) == bytes([0x61, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00])


def test_canonical_bytes_with_params_layout():
    m = ModelMeta("m", (("q", "8"), ("c", "2")), vocab_size=100)
    expected = b"m\x00" + b"c\x012\x01" + b"q\x018\x01" + b"\x00" + struct.pack("<2I", 5, 7)
    assert canonical_bytes(m, [5, 7]) == expected


def test_canonical_bytes_deterministic(meta):
    assert canonical_bytes(meta, [1, 2, 3]) == canonical_bytes(meta, [1, 2, 3])


def test_config_value_changes_bytes():
    a = ModelMeta("gemma", (("quant", "q8_0"),), 100)
    b = ModelMeta("gemma", (("quant", "q4_0"),), 100)
    assert canonical_bytes(a, [1]) != canonical_bytes(b, [1])
    assert cache_key(a, [1]) != cache_key(b, [1])


def test_params_are_sorted_and_unique():
    m = ModelMeta("x", (("b", "1"), ("a", "2")))
    assert m.config_params == (("a", "2"), ("b", "1"))
    with pytest.raises(InvalidInput):
        ModelMeta("x", (("a", "1"), ("a", "2")))


def test_empty_prefix_rejected(meta):
    with pytest.raises(InvalidInput):
        canonical_bytes(meta, [])
    with pytest.raises(InvalidInput):
        cache_key(meta, ())


def test_token_outside_vocab_rejected(meta):
    with pytest.raises(InvalidInput):
        cache_key(meta, [meta.vocab_size])


def test_different_prefixes_different_keys(meta):
    assert cache_key(meta, [1, 2]) != cache_key(meta, [1, 3])


def test_cache_key_is_pure():
    rng = random.Random(5)
    for _ in range(10_000):
        m = ModelMeta(f"m{rng.randrange(5)}", (("q", str(rng.randrange(3))),), 500)
        p = [rng.randrange(500) for _ in range(rng.randint(1, 8))]
        assert cache_key(m, p) == cache_key(m, list(p))


@given(
    name=st.text(min_size=1, max_size=8),
    value=st.text(max_size=8),
    tokens=st.lists(st.integers(0, 999), min_size=1, max_size=20),
    data=st.data(),
)
def test_single_field_change_changes_bytes(name, value, tokens, data):
    base = ModelMeta(name, (("quant", value),), 1000)
    b0 = canonical_bytes(base, tokens)
    assert canonical_bytes(ModelMeta(name + "x", base.config_params, 1000), tokens) != b0
    assert canonical_bytes(ModelMeta(name, (("quant", value + "x"),), 1000), tokens) != b0
    i = data.draw(st.integers(0, len(tokens) - 1))
    changed = list(tokens)
    changed[i] = (changed[i] + 1) % 1000
    assert canonical_bytes(base, changed) != b0


def test_prefix_keys_matches_cache_key(meta):
    rng = random.Random(0)
    toks = [rng.randrange(1, 1000) for _ in range(50)]
    ends = [3, 17, 50]
    assert prefix_keys(meta, toks, ends) == [cache_key(meta, toks[:e]) for e in ends]


def test_cache_key_range():
    with pytest.raises(InvalidInput):
        CacheKey(-1)
    with pytest.raises(InvalidInput):
        CacheKey(2**64)


def test_layout_full_concatenates():
    lay = PromptLayout((1, 2), ((3,), (4, 5)), (6,))
    assert lay.full() == (1, 2, 3, 4, 5, 6)
    assert len(lay) == 6
    assert lay.boundaries() == [2, 3, 5, 6]


def test_ranges_for_reference_prompt():
    # 10-token instruction, 5 examples ending at 57 and 340, 405 tokens total
    ex = ((0,) * 47, (0,) * 70, (0,) * 71, (0,) * 71, (0,) * 71)
    lay = PromptLayout((0,) * 10, ex, (0,) * 65)
    ranges = derive_ranges(lay)
    assert [r.end_index for r in ranges] == [10, 57, 340, 405]
    assert [r.label for r in ranges] == list(RangeLabel)


def test_ranges_degenerate_single():
    ranges = derive_ranges(PromptLayout((1,) * 7))
    assert [(r.end_index, r.label) for r in ranges] == [(7, RangeLabel.FULL_PROMPT)]


def test_ranges_one_example_collapses():
    ranges = derive_ranges(PromptLayout((1,) * 4, ((2,) * 3,), (3,) * 2))
    assert [(r.end_index, r.label) for r in ranges] == [
        (4, RangeLabel.INSTRUCTION_ONLY),
        (7, RangeLabel.INSTRUCTION_PLUS_ALL_EXAMPLES),
        (9, RangeLabel.FULL_PROMPT),
    ]


def test_ranges_empty_instruction_rejected():
    with pytest.raises(InvalidInput):
        derive_ranges(PromptLayout((), ((1,),), (2,)))


def test_ranges_on_segment_boundaries_property():
    rng = random.Random(11)
    for _ in range(1000):
        lay = random_layout(rng)
        ranges = derive_ranges(lay)
        ends = [r.end_index for r in ranges]
        assert ends == sorted(set(ends))
        assert ends[-1] == len(lay)
        assert set(ends) <= set(lay.boundaries())
        assert all(0 < e <= len(lay) for e in ends)
