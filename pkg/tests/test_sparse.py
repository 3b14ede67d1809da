from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvq.sparse import (
    SparseCSC,
    SparseCSR,
    balanced_segment_sum,
    balanced_spmv_csc,
    balanced_spmv_csr,
    csc_append_token,
    csr_append_token,
    outlier_count,
    outlier_thresholds,
    vector_outlier_split,
)
from oracles import naive_spmv_csc, naive_spmv_csr, split_by_sorting


def test_outlier_count_rounds_half_up():
    assert outlier_count(0.01, 128) == 1
    assert outlier_count(0.01, 4096) == 41
    assert outlier_count(0.25, 2) == 1
    assert outlier_count(0.0, 10) == 0


def test_split_examples():
    s = vector_outlier_split([0.1, -0.2, 9.0, 0.3, -8.0, 0.05, 0.15, -0.1], 0.25)
    assert s.outlier_indices.tolist() == [2, 4]
    assert s.lo == pytest.approx(-0.2) and s.hi == pytest.approx(0.3)
    s = vector_outlier_split(np.ones(8), 0.25)
    assert s.outlier_indices.tolist() == [0, 1]
    assert s.lo == s.hi == 1.0
    v = np.array([3.0, -1.0, 2.0])
    s = vector_outlier_split(v, 0.0)
    assert s.outlier_indices.size == 0 and (s.lo, s.hi) == (-1.0, 3.0)


def test_split_errors():
    with pytest.raises(ValueError):
        vector_outlier_split(np.ones(4), 0.5)
    with pytest.raises(ValueError):
        vector_outlier_split(np.ones(0), 0.01)


finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(hnp.arrays(np.float32, st.integers(1, 200), elements=finite), st.sampled_from([0.0, 0.001, 0.01, 0.05, 0.2]))
def test_split_matches_sort_oracle(v, f):
    if outlier_count(f, len(v)) >= len(v):
        return
    s = vector_outlier_split(v, f)
    assert set(s.outlier_indices.tolist()) == split_by_sorting(v, f)
    assert len(s.outlier_indices) == outlier_count(f, len(v))
    kept = np.setdiff1d(np.arange(len(v)), s.outlier_indices)
    assert np.all((v[kept] >= s.lo) & (v[kept] <= s.hi))
    lo, hi = outlier_thresholds(v[:, None], f, axis=0)
    assert (float(lo[0]), float(hi[0])) == (s.lo, s.hi)


def test_csc_append_examples():
    s = SparseCSC(8)
    csc_append_token(s, [(3, 0.5)])
    assert s.col_ptr.tolist() == [0, 1] and s.row_idx.tolist() == [3] and s.vals.tolist() == [0.5]
    csc_append_token(s, [])
    assert s.col_ptr.tolist() == [0, 1, 1]
    csc_append_token(s, [(0, -1.0), (7, 2.0)])
    assert s.col_ptr.tolist() == [0, 1, 1, 3]
    assert s.row_idx.tolist() == [3, 0, 7]
    assert s.vals.tolist() == [0.5, -1.0, 2.0]
    x = np.zeros(8)
    x[3] = 1
    np.testing.assert_array_equal(balanced_spmv_csc(s, x), [0.5, 0, 0])


def test_csr_append_examples():
    s = SparseCSR(4)
    csr_append_token(s, [(1, 0.25)])
    assert s.row_ptr.tolist() == [0, 1]
    np.testing.assert_array_equal(balanced_spmv_csr(s, [2.0]), [0, 0.5, 0, 0])
    csr_append_token(s, [])
    assert s.row_ptr.tolist() == [0, 1, 1]
    csr_append_token(s, [(0, 1.0), (3, -2.0)])
    assert s.row_ptr.tolist() == [0, 1, 1, 3]


def test_append_is_append_only():
    s = SparseCSR(5)
    s.append_token([(1, 1.0), (4, 2.0)])
    before = (s.row_ptr.copy(), s.col_idx.copy(), s.vals.copy())
    for i in range(100):
        s.append_token([(i % 5, float(i))])
        np.testing.assert_array_equal(s.row_ptr[:2], before[0])
        np.testing.assert_array_equal(s.col_idx[:2], before[1])
        np.testing.assert_array_equal(s.vals[:2], before[2])


def test_append_errors():
    s = SparseCSC(4)
    with pytest.raises(ValueError):
        s.append_token([(4, 1.0)])
    with pytest.raises(ValueError):
        s.append_token([(2, 1.0), (1, 1.0)])
    with pytest.raises(ValueError):
        balanced_spmv_csc(s, np.zeros(3))
    with pytest.raises(ValueError):
        balanced_spmv_csr(SparseCSR(4), np.zeros(2))


def test_empty_spmv():
    assert np.all(balanced_spmv_csc(SparseCSC(3), np.ones(3)) == 0)
    s = SparseCSR(3)
    s.append_token([])
    np.testing.assert_array_equal(balanced_spmv_csr(s, [1.0]), [0, 0, 0])


def _random_sparse(cls, width, n_tokens, rng, skew_to=None, nnz_skew=0):
    s = cls(width)
    for t in range(n_tokens):
        n = nnz_skew if t == skew_to else int(rng.integers(0, 4))
        idx = np.sort(rng.choice(width, size=min(n, width), replace=False))
        s.append_token(list(zip(idx.tolist(), rng.standard_normal(len(idx)).tolist())))
    return s


def test_skewed_csc_matches_oracle(rng):
    s = _random_sparse(SparseCSC, 10_000, 50, rng, skew_to=17, nnz_skew=10_000)
    x = rng.standard_normal(10_000)
    ref = naive_spmv_csc(s.col_ptr, s.row_idx, s.vals, x, s.n_tokens)
    got = balanced_spmv_csc(s, x)
    assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)


def test_skewed_csr_matches_oracle(rng):
    s = _random_sparse(SparseCSR, 4096, 200, rng, skew_to=3, nnz_skew=4096)
    w = rng.random(200)
    ref = naive_spmv_csr(s.row_ptr, s.col_idx, s.vals, w, 4096)
    got = balanced_spmv_csr(s, w)
    assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)


@given(st.integers(0, 2**32 - 1), st.integers(1, 80))
def test_chunk_size_invariance(seed, n_tokens):
    rng = np.random.default_rng(seed)
    s = _random_sparse(SparseCSC, 16, n_tokens, rng)
    x = rng.standard_normal(16)
    base = balanced_spmv_csc(s, x, chunk=10)
    for chunk in (1, 3, 64):
        np.testing.assert_allclose(balanced_spmv_csc(s, x, chunk=chunk), base, rtol=1e-6, atol=1e-12)
    # a fixed schedule is bitwise reproducible
    np.testing.assert_array_equal(balanced_spmv_csc(s, x, chunk=10), base)


def test_segment_sum_rejects_bad_chunk():
    with pytest.raises(ValueError):
        balanced_segment_sum(np.ones(3), np.zeros(3, int), 1, chunk=0)


def test_to_dense(rng):
    s = _random_sparse(SparseCSR, 6, 9, rng)
    dense = s.to_dense()
    assert dense.shape == (9, 6)
    ref = np.zeros((9, 6))
    for t in range(9):
        for j in range(s.row_ptr[t], s.row_ptr[t + 1]):
            ref[t, s.col_idx[j]] = s.vals[j]
    np.testing.assert_array_equal(dense, ref)
