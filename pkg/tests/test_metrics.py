import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from flatvi.errors import DomainError, ShapeError
from flatvi.metrics import (euclidean_distances, knn_overlap, knn_sets, mean_l2, mmd_linear, ot_coupling,
                            rowwise_spearman, spearman, standardize_like, velocity_consistency, wasserstein2)

small_cloud = st.integers(2, 6).flatmap(
    lambda n: st.tuples(arrays(np.float64, (n, 2), elements=st.floats(-5, 5)),
                        arrays(np.float64, (n, 2), elements=st.floats(-5, 5))))


def brute_force_cost(a, b):
    n = a.shape[0]
    return min(sum(np.sum((a[i] - b[p[i]]) ** 2) for i in range(n)) for p in itertools.permutations(range(n)))


@given(small_cloud)
def test_assignment_matches_brute_force(pair):
    a, b = pair
    c = ot_coupling(a, b)
    assert sorted(c.perm) == list(range(a.shape[0]))
    assert c.cost == pytest.approx(brute_force_cost(a, b), rel=1e-9, abs=1e-9)


@given(small_cloud)
def test_w2_symmetry_and_identity(pair):
    a, b = pair
    assert wasserstein2(a, a) == 0.0
    assert wasserstein2(a, b) == pytest.approx(wasserstein2(b, a), rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000))
def test_w2_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(12, 2)) * rng.uniform(0.5, 2) + rng.normal(size=2) for _ in range(3))
    assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-12


def test_w2_of_translation():
    a = np.random.default_rng(0).normal(size=(50, 3))
    shift = np.array([1.0, 2.0, 2.0])
    # translation is optimal for a shifted copy, so W2 is the shift length
    assert wasserstein2(a, a + shift) == pytest.approx(3.0, rel=1e-12)
    assert mean_l2(a, a + shift) == pytest.approx(3.0, rel=1e-12)


def test_w2_known_1d_value():
    # in 1-d the sorted matching is optimal
    a = np.array([0.0, 1.0, 2.0])
    b = np.array([5.0, 3.0, 4.0])
    assert wasserstein2(a, b) == pytest.approx(3.0)


def test_large_identical_clouds_are_zero():
    a = np.random.default_rng(1).normal(size=(700, 2))
    assert wasserstein2(a, a.copy()) == 0.0
    assert mean_l2(a, a.copy()) == 0.0


def test_unequal_clouds_are_subsampled_deterministically():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(300, 2)), rng.normal(size=(250, 2)) + 1
    assert wasserstein2(a, b, seed=3) == wasserstein2(a, b, seed=3)
    assert wasserstein2(a, b) > 0.5


def test_cloud_validation():
    with pytest.raises(ShapeError):
        wasserstein2(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(DomainError):
        wasserstein2(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        ot_coupling(np.zeros((3, 2)), np.zeros((4, 2)))


@given(arrays(np.float64, (5, 3), elements=st.floats(-3, 3)), arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_mmd_matches_kernel_double_sum(a, b):
    kaa, kbb, kab = a @ a.T, b @ b.T, a @ b.T
    ref = kaa.mean() + kbb.mean() - 2 * kab.mean()
    assert mmd_linear(a, b) == pytest.approx(max(ref, 0.0), abs=1e-9)


# ---------------------------------------------------------------- neighbourhoods


def test_knn_sets_break_ties_by_index():
    d = np.array([[0, 1, 1, 2], [1, 0, 3, 3], [1, 3, 0, 3], [2, 3, 3, 0]], dtype=float)
    np.testing.assert_array_equal(knn_sets(d, 2), [[1, 2], [0, 2], [0, 1], [0, 1]])


@given(arrays(np.float64, (12, 2), elements=st.floats(-10, 10), unique=True), st.integers(1, 5))
def test_knn_overlap_invariant_to_monotone_transform(z, k):
    d = euclidean_distances(z)
    assert knn_overlap(d, d, k) == 1.0
    assert knn_overlap(d, d**2, k) == 1.0
    assert knn_overlap(d, np.log1p(d), k) == 1.0


def test_knn_overlap_bounds_and_errors():
    rng = np.random.default_rng(3)
    d1 = euclidean_distances(rng.normal(size=(30, 2)))
    d2 = euclidean_distances(rng.normal(size=(30, 2)))
    assert 0.0 <= knn_overlap(d1, d2, 5) <= 1.0
    with pytest.raises(DomainError):
        knn_overlap(d1, d2, 30)
    with pytest.raises(ShapeError):
        knn_overlap(d1, d2[:5, :5], 3)


@given(arrays(np.float64, 20, elements=st.floats(-100, 100)), arrays(np.float64, 20, elements=st.floats(-100, 100)))
def test_spearman_matches_scipy(x, y):
    ours = spearman(x, y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = spearmanr(x, y).statistic
    if np.isnan(ref):
        assert np.isnan(ours)
    else:
        assert ours == pytest.approx(ref, abs=1e-12)


def test_spearman_hand_computed_fixture():
    # one adjacent swap among five: 1 - 6 * 2 / (5 * 24) = 0.9
    assert spearman([1, 2, 3, 4, 5], [1, 3, 2, 4, 5]) == 0.9


def test_spearman_known_values():
    x = np.arange(10.0)
    assert spearman(x, x**3) == pytest.approx(1.0)
    assert spearman(x, -x) == pytest.approx(-1.0)
    # one adjacent swap in n = 10 gives 1 - 6 * 2 / (10 * 99)
    y = x.copy()
    y[[3, 4]] = y[[4, 3]]
    assert spearman(x, y) == pytest.approx(1 - 12 / 990)


def test_rowwise_spearman_of_rescaled_distances_is_one():
    d = euclidean_distances(np.random.default_rng(4).normal(size=(15, 3)))
    assert rowwise_spearman(d, 3 * d + 1) == pytest.approx(1.0)


# ---------------------------------------------------------------- velocities


def test_consistency_of_uniform_flow_is_one():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(40, 2))
    v = np.tile([1.0, -2.0, 0.5], (40, 1))
    assert velocity_consistency(z, v, k=5) == pytest.approx(1.0)


def test_consistency_matches_direct_loop():
    rng = np.random.default_rng(6)
    z, v = rng.normal(size=(25, 2)), rng.normal(size=(25, 4))
    d = euclidean_distances(z)
    total = 0.0
    for j in range(25):
        nn = np.argsort(d[j])[1:6]
        total += np.mean([np.corrcoef(v[j], v[i])[0, 1] for i in nn])
    assert velocity_consistency(z, v, k=5) == pytest.approx(total / 25, rel=1e-12)


def test_zero_variance_velocities_count_as_zero():
    z = np.arange(8.0)[:, None]
    v = np.tile([1.0, 2.0, 3.0], (8, 1))
    v[0] = 5.0
    res = velocity_consistency(z, v, k=2, details=True)
    # cell 0 pairs with cells 1 and 2, cell 1 with cells 0 and 2
    assert res.degenerate_pairs == 3
    expect = (0 + 0.5 + 6 * 1.0) / 8
    assert res.value == pytest.approx(expect)


def test_standardize_like():
    rng = np.random.default_rng(7)
    ref = rng.normal(3.0, 2.0, size=(500, 2))
    out = standardize_like(ref, ref)
    np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(0), 1.0)
