"""Per-point local shape descriptors.

Extractors are plain callables ``extractor(points) -> (N, K) array`` with a
``dim`` attribute; :func:`make_extractor` builds one by name. FPFH is the
production extractor, ``stub`` returns constant rows for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import sparse

from .errors import ConfigError
from .geometry import as_points
from .neighbors import SpatialIndex

_ANCHOR_TIE = 1e-9


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def __call__(self, points: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class FpfhConfig:
    normal_radius: float = 0.1
    feature_radius: float = 0.2
    bins_per_angle: int = 11

    def __post_init__(self):
        if not (self.normal_radius > 0 and self.feature_radius > 0):
            raise ConfigError("FPFH radii must be > 0")
        if self.bins_per_angle < 2:
            raise ConfigError("bins_per_angle must be >= 2")

    @property
    def dim(self) -> int:
        return 3 * self.bins_per_angle


def _neighbor_pairs(index: SpatialIndex, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (owner, neighbour, distance) triples for all radius neighbourhoods, self included."""
    owners, nbrs, dists = [], [], []
    for i, (idx, d) in enumerate(index.radius_batch(index.points, radius)):
        owners.append(np.full(len(idx), i, dtype=np.int64))
        nbrs.append(idx)
        dists.append(d)
    return np.concatenate(owners), np.concatenate(nbrs), np.concatenate(dists)


def estimate_normals(points, radius: float, index: SpatialIndex | None = None) -> np.ndarray:
    """Unit normals from the smallest-eigenvalue eigenvector of each radius neighbourhood.

    Points with fewer than 3 neighbours in ``radius`` use their 10 nearest
    neighbours instead. Normals are oriented away from the cloud centroid.
    """
    pts = as_points(points)
    n = len(pts)
    if n < 3:
        raise ValueError(f"normal estimation needs >= 3 points, got {n}")
    index = index or SpatialIndex(pts)
    owner, nbr, _ = _neighbor_pairs(index, radius)
    counts = np.bincount(owner, minlength=n)

    sparse_pts = np.nonzero(counts < 3)[0]
    if len(sparse_pts):
        keep = counts[owner] >= 3
        knn_idx, _ = index.knn_batch(pts[sparse_pts], min(10, n))
        owner = np.concatenate([owner[keep], np.repeat(sparse_pts, knn_idx.shape[1])])
        nbr = np.concatenate([nbr[keep], knn_idx.reshape(-1)])
        counts = np.bincount(owner, minlength=n)

    q = pts[nbr]
    mean = np.zeros((n, 3))
    np.add.at(mean, owner, q)
    mean /= counts[:, None]
    c = q - mean[owner]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, owner, c[:, :, None] * c[:, None, :])
    cov /= counts[:, None, None]
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0))
    normals[outward < 0] *= -1.0
    return normals


def pair_features(p1, n1, p2, n2) -> np.ndarray:
    """Darboux-frame angle triple for each row pair, shape ``(P, 3)``.

    Columns are the in-plane angle in [-pi, pi], then two cosines in [-1, 1].
    The frame is anchored at whichever endpoint's normal is closer to
    parallel with the connecting segment (near-ties keep the first point), so
    the result is symmetric in the pair. Coincident points or a normal
    parallel to the segment give zeros.
    """
    d = p2 - p1
    f4 = np.linalg.norm(d, axis=1)
    out = np.zeros((len(d), 3))
    ok = f4 > 0
    safe = np.where(ok, f4, 1.0)
    a1 = np.einsum("ij,ij->i", n1, d) / safe
    a2 = np.einsum("ij,ij->i", n2, d) / safe
    # near-ties (parallel normals on flat patches) keep the first point as anchor so
    # rounding noise from a rigid motion cannot flip the frame
    swap = np.abs(a2) - np.abs(a1) > _ANCHOR_TIE
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    cos_u = np.where(swap, -a2, a1)

    v = np.cross(d, u)
    v_norm = np.linalg.norm(v, axis=1)
    ok &= v_norm > 0
    v /= np.where(v_norm > 0, v_norm, 1.0)[:, None]
    w = np.cross(u, v)
    sin_part = np.einsum("ij,ij->i", w, other)
    # a signed zero here would put the angle on either side of the +-pi cut
    sin_part = np.where(np.abs(sin_part) < _ANCHOR_TIE, 0.0, sin_part)
    out[:, 0] = np.arctan2(sin_part, np.einsum("ij,ij->i", u, other))
    out[:, 1] = np.einsum("ij,ij->i", v, other)
    out[:, 2] = cos_u
    out[~ok] = 0.0
    return out


def _bin(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    idx = np.floor(bins * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def compute_fpfh(points, cfg: FpfhConfig = FpfhConfig()) -> np.ndarray:
    """Fast Point Feature Histograms, shape ``(N, 3 * bins_per_angle)``.

    Each of the three angle sub-histograms of every row sums to 100
    (or is all zeros for a point with no usable neighbours).
    """
    pts = as_points(points)
    n = len(pts)
    if n < 5:
        raise ValueError(f"FPFH needs >= 5 points, got {n}")
    index = SpatialIndex(pts)
    normals = estimate_normals(pts, cfg.normal_radius, index)

    owner, nbr, dist = _neighbor_pairs(index, cfg.feature_radius)
    not_self = owner != nbr
    owner, nbr, dist = owner[not_self], nbr[not_self], dist[not_self]
    if len(owner) == 0:
        raise ValueError(f"feature_radius={cfg.feature_radius} leaves every point without neighbours")

    b = cfg.bins_per_angle
    feats = pair_features(pts[owner], normals[owner], pts[nbr], normals[nbr])
    counts = np.bincount(owner, minlength=n)
    incr = 100.0 / counts[owner]
    spfh = np.zeros((n, 3 * b))
    np.add.at(spfh, (owner, _bin(feats[:, 0], -np.pi, np.pi, b)), incr)
    np.add.at(spfh, (owner, b + _bin(feats[:, 1], -1.0, 1.0, b)), incr)
    np.add.at(spfh, (owner, 2 * b + _bin(feats[:, 2], -1.0, 1.0, b)), incr)

    pos = dist > 0
    weights = sparse.csr_matrix((1.0 / dist[pos], (owner[pos], nbr[pos])), shape=(n, n))
    fpfh = spfh + weights @ spfh
    sub = fpfh.reshape(n, 3, b)
    sums = sub.sum(axis=2, keepdims=True)
    sub = np.divide(100.0 * sub, sums, out=np.zeros_like(sub), where=sums > 0)
    return sub.reshape(n, 3 * b)


class FpfhExtractor:
    name = "fpfh"

    def __init__(self, cfg: FpfhConfig = FpfhConfig()):
        self.cfg = cfg
        self.dim = cfg.dim

    def __call__(self, points) -> np.ndarray:
        return compute_fpfh(points, self.cfg)


class StubExtractor:
    """Every point gets the same feature row."""

    name = "stub"

    def __init__(self, dim: int = 33, value: float = 1.0):
        self.dim = dim
        self.value = value

    def __call__(self, points) -> np.ndarray:
        return np.full((len(as_points(points)), self.dim), self.value)


def make_extractor(name: str, **options) -> FeatureExtractor:
    builders = {"fpfh": lambda: FpfhExtractor(FpfhConfig(**options)), "stub": lambda: StubExtractor(**options)}
    if name in builders:
        try:
            return builders[name]()
        except TypeError as exc:
            raise ConfigError(f"bad options for extractor {name!r}: {exc}") from None
    raise ConfigError(f"unknown feature extractor {name!r} (expected 'fpfh' or 'stub')")


def extract(extractor: FeatureExtractor, points) -> np.ndarray:
    pts = as_points(points)
    feats = np.asarray(extractor(pts), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(pts):
        raise ValueError(f"extractor {extractor.name!r} returned shape {feats.shape} for {len(pts)} points")
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"extractor {extractor.name!r} produced non-finite features")
    return feats
