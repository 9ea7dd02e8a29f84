import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidtree.core import (
    BudgetExceeded, PrefixTrie, Vocab, enumerate_all_sids, lcp_len, level_offset, node_id,
    prefix_from_index, prefix_index, render_sid, substream,
)


@pytest.mark.parametrize("a,b,expected", [
    ((0, 1, 2), (0, 1, 3), 2),
    ((0, 1, 2), (0, 1, 2), 3),
    ((0, 1, 2), (5, 1, 2), 0),
])
def test_lcp_len_examples(a, b, expected):
    assert lcp_len(a, b) == expected


def test_lcp_len_length_mismatch():
    with pytest.raises(ValueError):
        lcp_len((0, 1), (0, 1, 2))


sids3 = st.tuples(*[st.integers(0, 3)] * 3)


@given(sids3, sids3)
def test_lcp_len_properties(a, b):
    n = lcp_len(a, b)
    assert n == lcp_len(b, a)
    assert a[:n] == b[:n]
    if n < 3:
        assert a[n] != b[n]
    assert lcp_len(a, a) == 3


def test_enumerate_small_cases():
    assert enumerate_all_sids(2, 2) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert enumerate_all_sids(3, 1) == [(0,), (1,), (2,)]


def test_enumerate_count_and_order():
    sids = enumerate_all_sids(4, 3)
    assert len(sids) == 64 == len(set(sids))
    assert sids == sorted(sids)


def test_enumerate_guard():
    with pytest.raises(BudgetExceeded):
        enumerate_all_sids(32, 5)


def test_vocab_validation():
    with pytest.raises(ValueError):
        Vocab(1, 3)
    v = Vocab(4, 3)
    assert v.check_prefix(()) == ()
    with pytest.raises(ValueError):
        v.check_prefix((4,))
    with pytest.raises(ValueError):
        v.check_sid((0, 1))
    with pytest.raises(ValueError):
        v.check_prefix((0, 0, 0, 0))


@given(st.integers(2, 6), st.integers(0, 3))
def test_node_ids_are_dense_and_invertible(V, depth):
    # breadth-first numbering: every prefix of every depth gets a distinct consecutive id
    prefixes = list(itertools.product(range(V), repeat=depth))
    ids = [node_id(p, V) for p in prefixes]
    assert ids == list(range(level_offset(V, depth), level_offset(V, depth + 1)))
    for p in prefixes:
        assert prefix_from_index(prefix_index(p, V), depth, V) == p


def test_prefix_trie_children_and_depths():
    trie = PrefixTrie(Vocab(4, 3))
    trie[()] = "root"
    trie[(2,)] = "a"
    trie[(0,)] = "b"
    trie[(2, 3)] = "c"
    assert trie.children(()) == [0, 2]
    assert trie.children((2,)) == [3]
    assert trie.at_depth(1) == [(0,), (2,)]
    assert len(trie) == 4 and (2, 3) in trie and trie.get((1,)) is None
    with pytest.raises(ValueError):
        trie[(4,)] = "bad"


def test_render_sid():
    assert render_sid((3, 0, 12)) == "<a_3><b_0><c_12>"


def test_substreams_are_reproducible_and_distinct():
    a = substream(7, "decode", 1).integers(1 << 30, size=4)
    b = substream(7, "decode", 1).integers(1 << 30, size=4)
    c = substream(7, "decode", 2).integers(1 << 30, size=4)
    assert (a == b).all() and not (a == c).all()
