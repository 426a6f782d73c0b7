import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mint.masking import (BIDIRECTIONAL, CAUSAL_MULTIMODAL, UNIMODAL, batch_masks, build_bidirectional_mask,
                          build_causal_multimodal_mask, build_mask, build_unimodal_mask, text_only_mask)


def grid(rows):
    return np.array(rows, dtype=bool)


def oracle_allow(kind, q_len, valid, i, j):
    """Entry-wise rule, written independently of the builders."""
    n_i_query, n_j_query = i < q_len, j < q_len
    if not n_j_query and not valid[j - q_len]:
        return False
    if kind == BIDIRECTIONAL:
        return True
    if kind == UNIMODAL:
        return n_i_query == n_j_query
    # causal multimodal
    if n_i_query:
        return n_j_query
    return n_j_query or (j <= i)


def test_unimodal_examples():
    assert (build_unimodal_mask(2, [1, 1]).allow == grid([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])).all()
    m = build_unimodal_mask(1, [1, 0]).allow
    assert not m[:, 2].any()
    assert m[1].tolist() == [False, True, False]
    assert build_unimodal_mask(3, []).allow.all() and build_unimodal_mask(3, []).allow.shape == (3, 3)


def test_bidirectional_examples():
    assert build_bidirectional_mask(2, [1, 1]).allow.all()
    m = build_bidirectional_mask(2, [1, 0]).allow
    assert not m[:, 3].any() and m[:, :3].all()
    assert build_bidirectional_mask(1, [1, 1, 1]).allow.all()


def test_causal_examples():
    assert (build_causal_multimodal_mask(2, [1, 1]).allow
            == grid([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]])).all()
    assert (build_causal_multimodal_mask(1, [1]).allow == grid([[1, 0], [1, 1]])).all()
    m = build_causal_multimodal_mask(2, [1, 1, 0]).allow
    assert not m[:, 4].any()
    assert m[3].tolist() == [True, True, True, True, False]


@pytest.mark.parametrize("builder", [build_unimodal_mask, build_bidirectional_mask, build_causal_multimodal_mask])
def test_no_queries(builder):
    with pytest.raises(ValueError, match="no queries"):
        builder(0, [1])


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown mask kind"):
        build_mask("diagonal", 1, [])


def test_text_dump():
    assert build_causal_multimodal_mask(1, [1]).to_text() == "10\n11"


def test_batch_masks_shapes():
    valid = torch.tensor([[True, True, False], [True, False, False]])
    m = batch_masks(CAUSAL_MULTIMODAL, 2, valid)
    assert m.shape == (2, 5, 5) and m.dtype == torch.bool
    assert batch_masks(UNIMODAL, 4, None).shape == (1, 4, 4)


def test_text_only_mask_is_text_block():
    assert (text_only_mask([1, 1, 0]) == build_unimodal_mask(1, [1, 1, 0]).allow[1:, 1:]).all()


def padding_patterns(t_len):
    # padding is a suffix, so there are t_len + 1 patterns per length
    return [[True] * k + [False] * (t_len - k) for k in range(t_len + 1)]


def test_exhaustive_against_entry_oracle():
    for q_len in range(1, 9):
        for t_len in range(0, 9):
            for valid in padding_patterns(t_len):
                for kind in (UNIMODAL, BIDIRECTIONAL, CAUSAL_MULTIMODAL):
                    allow = build_mask(kind, q_len, valid).allow
                    n = q_len + t_len
                    expect = np.array([[oracle_allow(kind, q_len, valid, i, j) for j in range(n)] for i in range(n)],
                                      dtype=bool).reshape(n, n)
                    assert (allow == expect).all(), (kind, q_len, valid)


@given(st.integers(1, 8), st.integers(0, 8), st.data())
def test_invariants(q_len, t_len, data):
    k = data.draw(st.integers(0, t_len))
    valid = [True] * k + [False] * (t_len - k)
    uni = build_unimodal_mask(q_len, valid).allow
    bi = build_bidirectional_mask(q_len, valid).allow
    ca = build_causal_multimodal_mask(q_len, valid).allow
    q = q_len
    n_valid = q_len + k
    for m in (uni, bi, ca):
        assert m.size == (q_len + t_len) ** 2
        assert all(m[i, i] for i in range(n_valid))
        assert not m[:, n_valid:].any()
    assert uni[:q, q:].sum() == 0 and uni[q:, :q].sum() == 0
    tt = ca[q:n_valid, q:n_valid]
    assert (tt == np.tril(np.ones_like(tt))).all()
    assert not ca[:q, q:].any()
    assert ca[q:n_valid, :q].all()
    assert (bi >= uni).all() and (bi >= ca).all()


@given(st.integers(1, 8), st.integers(0, 7))
def test_causal_prefix_stability(q_len, t_len):
    short = build_causal_multimodal_mask(q_len, [True] * t_len).allow
    longer = build_causal_multimodal_mask(q_len, [True] * (t_len + 1)).allow
    n = q_len + t_len
    assert (longer[:n, :n] == short).all()
