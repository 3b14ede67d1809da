from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from kvq.nuq import (
    AffineParams,
    NuqCodebook,
    QNormStats,
    apply_qnorm,
    codebook_json,
    coverage_gap,
    decode,
    derive_codebook,
    encode,
    encode_array,
    fit_weighted_kmeans_1d,
    max_gap,
    normalize_vector,
    qnorm_stats,
    weighted_kmeans_1d,
)
from oracles import exhaustive_kmeans_1d


def cb4(c):
    return NuqCodebook(2, np.asarray(c, dtype=np.float32))


# --- normalization -------------------------------------------------------------


def test_normalize_examples():
    xn, aff = normalize_vector([0, 2, 4], 0, 4)
    np.testing.assert_array_equal(xn, [-1, 0, 1])
    assert (aff.scale, aff.offset, aff.degenerate) == (2, 2, False)
    xn, aff = normalize_vector([-1, 0.25, 1], -1, 1)
    np.testing.assert_array_equal(xn, [-1, 0.25, 1])
    xn, aff = normalize_vector([5, 5], 5, 5)
    np.testing.assert_array_equal(xn, [0, 0])
    assert aff.scale == 1 and aff.offset == 5 and aff.degenerate
    with pytest.raises(ValueError):
        normalize_vector([1], 2, 1)


def test_degenerate_decode_returns_offset_exactly():
    cb = cb4([-1, -0.3, 0.4, 1])
    aff = AffineParams(1.0, 5.0, degenerate=True)
    assert all(decode(c, cb, aff) == 5.0 for c in range(4))


# --- k-means -------------------------------------------------------------------


def test_kmeans_hand_examples():
    r = fit_weighted_kmeans_1d([-1, 0, 1], [1, 4, 2], 2)
    np.testing.assert_allclose(r.centroids, [-0.2, 1.0], atol=1e-12)
    assert r.objective == pytest.approx(0.8)
    np.testing.assert_allclose(weighted_kmeans_1d([-1, -0.9, 0.8, 1.0], [1] * 4, 2), [-0.95, 0.9], atol=1e-12)


def test_kmeans_constant_points():
    r = fit_weighted_kmeans_1d([0.3] * 7, [1] * 7, 4)
    np.testing.assert_array_equal(r.centroids, [0.3] * 4)
    assert r.objective == 0


def test_kmeans_errors():
    with pytest.raises(ValueError):
        fit_weighted_kmeans_1d([1, 2], [0, 0], 2)
    with pytest.raises(ValueError):
        fit_weighted_kmeans_1d([1, 2], [1, 1], 0)
    with pytest.raises(ValueError):
        fit_weighted_kmeans_1d([1, 2], [1, -1], 1)


def test_kmeans_converged_centroids_are_cluster_means(rng):
    x = rng.standard_normal(3000)
    w = rng.random(3000)
    r = fit_weighted_kmeans_1d(x, w, 8, max_iter=500, tol=0)
    c = r.centroids
    assign = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
    for j in range(8):
        m = assign == j
        np.testing.assert_allclose(c[j], np.sum(w[m] * x[m]) / np.sum(w[m]), atol=1e-9)


def test_kmeans_large_input_stays_monotone(rng):
    x = np.concatenate([rng.standard_normal(50_000), rng.uniform(-1, 1, 20_000)])
    r = fit_weighted_kmeans_1d(x, rng.exponential(size=len(x)), 16)
    h = np.asarray(r.history)
    assert np.all(h[1:] <= h[:-1] * (1 + 1e-9))


@given(st.integers(1, 10), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_kmeans_matches_exhaustive_optimum(n, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    w = rng.random(n) + 0.05
    r = fit_weighted_kmeans_1d(x, w, k)
    opt = exhaustive_kmeans_1d(x, w, k)
    assert r.objective <= opt * 1.05 + 1e-12
    h = np.asarray(r.history)
    assert np.all(h[1:] <= h[:-1] * (1 + 1e-9) + 1e-15)


def test_kmeans_separated_clusters_hit_optimum_exactly(rng):
    for _ in range(20):
        centers = np.sort(rng.choice(np.arange(-50, 50), size=3, replace=False)) * 10.0
        x = np.concatenate([c + rng.uniform(-0.5, 0.5, size=3) for c in centers])
        w = rng.random(len(x)) + 0.1
        r = fit_weighted_kmeans_1d(x, w, 3)
        assert r.objective == pytest.approx(exhaustive_kmeans_1d(x, w, 3), rel=1e-9, abs=1e-12)


# --- codebook derivation ----------------------------------------------------------


def test_uniform_points_give_symmetric_codebook():
    x = np.random.default_rng(7).uniform(-1, 1, 10_000)
    cb = derive_codebook(x, None, 2)
    c = cb.centroids
    assert len(c) == 4 and np.all(np.diff(c) > 0)
    np.testing.assert_allclose(c, -c[::-1], atol=0.05)


def test_two_point_calibration():
    cb = derive_codebook(np.array([-1.0, 1.0] * 10), np.ones(20), 2)
    assert -1.0 in cb.centroids and 1.0 in cb.centroids
    assert len(np.unique(cb.centroids)) == 4


def test_center_weighted_fisher_condenses_middle_signposts():
    x = np.random.default_rng(3).uniform(-1, 1, 20_000)
    w = 1.0 / (np.abs(x) + 0.1)
    c = derive_codebook(x, w, 3).centroids.astype(np.float64)
    gaps = np.diff(c)
    assert gaps[3] < gaps[0] and gaps[3] < gaps[-1]
    flat = np.diff(derive_codebook(x, None, 3).centroids.astype(np.float64))
    assert gaps[3] < flat[3]


@given(st.sampled_from([2, 3, 4]), st.integers(0, 2**32 - 1))
def test_codebook_is_sorted_inside_unit_interval(bits, seed):
    rng = np.random.default_rng(seed)
    x = np.clip(rng.standard_normal(500) * rng.uniform(0.1, 2), -1, 1)
    cb = derive_codebook(x, rng.random(500), bits)
    assert cb.centroids.shape == (1 << bits,)
    assert np.all(np.diff(cb.centroids) > 0)
    assert cb.centroids.min() >= -1 and cb.centroids.max() <= 1


# --- Q-Norm ------------------------------------------------------------------------


def test_qnorm_hand_example():
    cb = NuqCodebook(2, np.array([-1, 0, 0.5, 1], np.float32))
    q = apply_qnorm(cb, QNormStats(mu1=0, sigma1=1, mu2=0.1, sigma2=0.8))
    np.testing.assert_allclose(q.levels[[0, 1, 3]], [-1.375, -0.125, 1.125], rtol=1e-6)
    assert q.qnorm_applied and not cb.qnorm_applied
    # encode signposts are untouched
    np.testing.assert_array_equal(q.centroids, cb.centroids)


def test_qnorm_identity_stats():
    cb = cb4([-1, -0.2, 0.3, 1])
    np.testing.assert_array_equal(apply_qnorm(cb, QNormStats(0.1, 0.5, 0.1, 0.5)).levels, cb.levels)


def test_qnorm_matches_moments():
    x = np.random.default_rng(2).standard_normal(5000) * 0.4
    cb = derive_codebook(np.clip(x, -1, 1), None, 2)
    q = apply_qnorm(cb, qnorm_stats(x, cb))
    deq = q.levels[encode_array(x, q)].astype(np.float64)
    assert deq.mean() == pytest.approx(x.mean(), abs=1e-5)
    assert deq.std() == pytest.approx(x.std(), rel=1e-5)


def test_qnorm_rejects_bad_sigma():
    with pytest.raises(ValueError):
        QNormStats(0, 0, 0, 1)


@given(st.floats(-1, 1), st.floats(0.01, 3), st.floats(-1, 1), st.floats(0.01, 3))
def test_qnorm_preserves_order(mu1, s1, mu2, s2):
    cb = cb4([-0.9, -0.1, 0.2, 0.95])
    lv = apply_qnorm(cb, QNormStats(mu1, s1, mu2, s2)).levels
    assert np.all(np.diff(lv) >= 0)


# --- encode / decode ---------------------------------------------------------------------


def test_encode_examples():
    cb = cb4([-1, 0, 1, 2])
    assert encode(0.4, cb) == 1
    assert encode(0.5, cb) == 1  # tie goes to the lower index
    assert encode(-7, cb) == 0 and encode(9, cb) == 3
    for j, c in enumerate(cb.centroids):
        assert encode(float(c), cb) == j
        assert decode(j, cb, AffineParams(1.0, 0.0)) == c


def test_decode_hand_value():
    cb = cb4([-1, 0, 0.5, 1])
    assert decode(2, cb, AffineParams(2.0, 1.0)) == 2.0
    with pytest.raises(ValueError):
        decode(4, cb, AffineParams(1.0, 0.0))


@given(st.floats(-1, 1, width=32), st.floats(0.01, 100), st.floats(-50, 50))
def test_roundtrip_error_bound(xn, scale, offset):
    cb = cb4([-1, -0.3, 0.4, 1])
    aff = AffineParams(scale, offset)
    x = xn * scale + offset
    err = abs(decode(encode(xn, cb), cb, aff) - x)
    assert err <= scale * max_gap(cb) / 2 * (1 + 1e-5) + 1e-4 * (abs(offset) + scale)


def test_coverage_gap_accounts_for_inward_ends():
    cb = cb4([-0.5, 0, 0.2, 0.6])
    assert max_gap(cb) == pytest.approx(0.5)
    assert coverage_gap(cb) == pytest.approx(1.0)


def test_codebook_serialization():
    cb = apply_qnorm(cb4([-1, -0.25, 0.5, 1]), QNormStats(0.0, 1.0, 0.1, 0.9))
    assert NuqCodebook.from_dict(cb.to_dict()) == cb
    s = codebook_json(cb, 3, "key")
    assert '"layer_id": 3' in s and '"tensor_kind": "key"' in s
    with pytest.raises(ValueError):
        codebook_json(cb, 0, "query")


def test_codebook_validation():
    with pytest.raises(ValueError):
        NuqCodebook(2, np.array([1, 0, 2, 3], np.float32))
    with pytest.raises(ValueError):
        NuqCodebook(2, np.zeros(3, np.float32))
    with pytest.raises(ValueError):
        NuqCodebook(5, np.zeros(32, np.float32))
