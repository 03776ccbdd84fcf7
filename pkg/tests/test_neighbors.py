import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idam.neighbors import SpatialIndex


def brute_knn(pts, q, k):
    d = np.sqrt(((pts - q) ** 2).sum(-1))
    order = np.lexsort((np.arange(len(pts)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def brute_radius(pts, q, r):
    d = np.sqrt(((pts - q) ** 2).sum(-1))
    order = np.lexsort((np.arange(len(pts)), d))
    return [(int(i), float(d[i])) for i in order if d[i] <= r]


def test_query_on_indexed_point():
    pts = np.random.default_rng(0).normal(size=(40, 3))
    idx = SpatialIndex(pts)
    assert idx.knn(pts[17], 1) == [(17, 0.0)]


def test_knn_matches_brute_force_100():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(100, 3))
    idx = SpatialIndex(pts)
    for q in rng.uniform(-1.2, 1.2, size=(50, 3)):
        assert idx.knn(q, 5) == brute_knn(pts, q, 5)


def test_equidistant_tie_prefers_lower_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [3.0, 0, 0]])
    idx = SpatialIndex(pts)
    assert [i for i, _ in idx.knn([0, 0, 0], 2)] == [0, 1]
    # reversed storage order: the lower index still wins
    idx = SpatialIndex(pts[[1, 0, 2]])
    assert idx.knn([0, 0, 0], 1)[0][0] == 0


def test_many_ties_across_k_boundary():
    # 20 copies of the same point and one nearer point: k=5 must pick the lowest copy indices
    pts = np.vstack([np.tile([1.0, 1.0, 1.0], (20, 1)), [[0.1, 0.0, 0.0]]])
    idx = SpatialIndex(pts, leaf_size=2)
    assert [i for i, _ in idx.knn([0, 0, 0], 5)] == [20, 0, 1, 2, 3]


def test_knn_range_errors():
    idx = SpatialIndex(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        idx.knn([0, 0, 0], 0)
    with pytest.raises(ValueError):
        idx.knn([0, 0, 0], 5)


def test_radius_edges():
    pts = np.random.default_rng(2).uniform(size=(50, 3)) + 5.0
    idx = SpatialIndex(pts)
    assert idx.radius_neighbors([0, 0, 0], 1.0) == []
    assert len(idx.radius_neighbors([0, 0, 0], 1e9)) == 50
    with pytest.raises(ValueError):
        idx.radius_neighbors([0, 0, 0], 0.0)


def test_radius_includes_boundary():
    pts = np.array([[0.5, 0, 0], [0.25, 0, 0], [0.75, 0, 0]])
    assert SpatialIndex(pts).radius_neighbors([0, 0, 0], 0.5) == [(1, 0.25), (0, 0.5)]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2048), st.integers(0, 2**31), st.integers(1, 12), st.floats(0.01, 1.0))
def test_matches_brute_force_property(n, seed, k, r):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    if n > 3:
        pts[: n // 4] = np.round(pts[: n // 4], 1)  # force duplicates and exact ties
    idx = SpatialIndex(pts)
    k = min(k, n)
    for q in np.vstack([rng.uniform(-1, 1, size=(3, 3)), pts[:2]]):
        assert idx.knn(q, k) == brute_knn(pts, q, k)
        assert idx.radius_neighbors(q, r) == brute_radius(pts, q, r)
