"""Weighted absolute orientation: the rigid (R, t) minimising sum_i w_i |R p_i + t - q_i|^2."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfigurationError
from .geometry import RigidTransform

RANK_TOL = 1e-12


def solve_weighted_procrustes(src, dst, weights=None) -> RigidTransform:
    """Reflection-corrected SVD solution (Kabsch/Umeyama without scale).

    ``weights`` default to uniform and are renormalised to sum to one.
    Raises :class:`DegenerateConfigurationError` when fewer than three pairs
    carry weight or the weighted source points are (nearly) collinear.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"correspondence arrays must both be (M, 3), got {src.shape} and {dst.shape}")
    w = np.full(len(src), 1.0) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(src),):
        raise ValueError("one weight per correspondence required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if np.count_nonzero(w) < 3:
        raise DegenerateConfigurationError("fewer than 3 correspondences with non-zero weight")
    w = w / w.sum()

    p_bar = w @ src
    q_bar = w @ dst
    H = (src - p_bar).T @ (w[:, None] * (dst - q_bar))
    U, s, Vt = np.linalg.svd(H)
    if s[0] == 0.0 or s[1] < RANK_TOL * s[0]:
        raise DegenerateConfigurationError(f"cross-covariance rank < 2 (singular values {s})")
    V = Vt.T
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(V @ U.T))])
    R = V @ D @ U.T
    return RigidTransform(R, q_bar - R @ p_bar)


def weighted_objective(t: RigidTransform, src, dst, weights=None) -> float:
    r = t.apply(src) - np.asarray(dst, dtype=np.float64)
    w = np.full(len(r), 1.0 / len(r)) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(w @ (r * r).sum(axis=1))
