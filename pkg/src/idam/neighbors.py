"""Exact k-nearest-neighbour and radius search over 3D points.

The tree itself is scipy's ``cKDTree``; this wrapper re-ranks every candidate
with locally computed Euclidean distances so that results, ordering and
tie-breaking (equal distance -> lower point index) are identical to a brute
force scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_points

_SLACK = 1e-9


class SpatialIndex:
    """Immutable k-d tree over a point cloud."""

    def __init__(self, points, leaf_size: int = 16):
        self.points = as_points(points)
        self.points.flags.writeable = False
        self.leaf_size = leaf_size
        self._tree = cKDTree(self.points, leafsize=leaf_size)

    def __len__(self) -> int:
        return self.points.shape[0]

    def _dist(self, idx: np.ndarray, q: np.ndarray) -> np.ndarray:
        diff = self.points[idx] - q
        return np.sqrt((diff * diff).sum(-1))

    def _ranked(self, idx, q) -> tuple[np.ndarray, np.ndarray]:
        # ranking uses the reported (rounded) Euclidean distance so ties match a brute-force scan
        idx = np.asarray(idx, dtype=np.int64)
        d = self._dist(idx, q)
        order = np.lexsort((idx, d))
        return idx[order], d[order]

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        idx, dist = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def knn_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of each query row: ``(indices, distances)``, both ``(Q, k)``."""
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        kk = min(k + 1, n)
        _, cand = self._tree.query(Q, k=kk)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(Q), kk)
        d = self._dist(cand, Q[:, None, :])
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d = np.take_along_axis(d, order, axis=-1)
        if kk > k:
            # a tie across the k-th boundary may hide a lower-index point; rescan those rows exactly
            for row in np.nonzero(d[:, k] <= d[:, k - 1] * (1.0 + _SLACK))[0]:
                radius = d[row, k - 1] * (1.0 + _SLACK) + 1e-300
                idx, rd = self._ranked(self._tree.query_ball_point(Q[row], radius), Q[row])
                cand[row, :k] = idx[:k]
                d[row, :k] = rd[:k]
        return cand[:, :k], d[:, :k]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Single nearest neighbour per query row: ``(indices (Q,), distances (Q,))``."""
        idx, dist = self.knn_batch(queries, 1)
        return idx[:, 0], dist[:, 0]

    def radius_neighbors(self, query, r: float) -> list[tuple[int, float]]:
        idx, dist = self.radius_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), r)[0]
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def radius_batch(self, queries, r: float) -> list[tuple[np.ndarray, np.ndarray]]:
        """All points within distance ``r`` of each query, ascending by (distance, index)."""
        if not r > 0:
            raise ValueError(f"radius must be > 0, got {r}")
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = []
        for q, cand in zip(Q, self._tree.query_ball_point(Q, r * (1.0 + _SLACK))):
            idx, d = self._ranked(cand, q)
            keep = d <= r
            out.append((idx[keep], d[keep]))
        return out


def brute_force_knn(points, query, k: int) -> list[tuple[int, float]]:
    """Reference scan used by the self-test; O(N) per query."""
    pts = np.asarray(points, dtype=np.float64)
    diff = pts - np.asarray(query, dtype=np.float64)
    d = np.sqrt((diff * diff).sum(-1))
    order = np.lexsort((np.arange(len(pts)), d))[:k]
    return [(int(i), float(d[i])) for i in order]
