"""Mutual-supervision losses and balanced training-point sampling.

Ground-truth geometry enters only through ``gt_src``: the sampled source
points mapped by the true transform. Each loss returns its value together
with the exact gradient with respect to its direct input.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import RigidTransform, as_points
from .neighbors import SpatialIndex

SAMPLING_EPS = 1e-6
V_CLAMP = 1e-7
_TINY = 1e-300


def _sq_dists(a, b) -> np.ndarray:
    diff = np.asarray(a, dtype=np.float64)[:, None, :] - np.asarray(b, dtype=np.float64)[None, :, :]
    return (diff * diff).sum(-1)


def matching_targets(gt_src, tgt_pts, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Closest sampled target per source point (``j*``) and the within-``r`` gate."""
    d2 = _sq_dists(gt_src, tgt_pts)
    jstar = d2.argmin(axis=1)
    gate = d2[np.arange(len(jstar)), jstar] <= r * r
    return jstar, gate


def matching_loss(S, gt_src, tgt_pts, r: float):
    """Gated cross-entropy of each row of ``S`` against its nearest true target.

    Returns ``(loss, dS)``.
    """
    S = np.asarray(S, dtype=np.float64)
    M = len(S)
    jstar, gate = matching_targets(gt_src, tgt_pts, r)
    gate = gate.astype(np.float64)
    rows = np.arange(M)
    p = np.maximum(S[rows, jstar], _TINY)
    loss = float(np.sum(-np.log(p) * gate) / M)
    dS = np.zeros_like(S)
    dS[rows, jstar] = -gate / (M * p)
    return loss, dS


def matching_logit_grad(S, jstar, gate) -> np.ndarray:
    """Gradient of the matching loss w.r.t. the pre-softmax logits (stable form)."""
    S = np.asarray(S, dtype=np.float64)
    M = len(S)
    g = S.copy()
    g[np.arange(M), jstar] -= 1.0
    return g * (gate[:, None] / M)


def softmax_backward(S, dS) -> np.ndarray:
    """Chain ``dL/dS`` through a row softmax to ``dL/dlogits``."""
    return S * (dS - (dS * S).sum(axis=1, keepdims=True))


def negative_entropy(S) -> np.ndarray:
    """Row-wise sum_j S log S (0 log 0 = 0); lies in [-log M, 0]."""
    S = np.asarray(S, dtype=np.float64)
    logS = np.log(np.where(S > 0, S, 1.0))
    return (S * logS).sum(axis=1)


def negative_entropy_loss(s, S1):
    """Mean squared gap between significance scores and row negative entropies of ``S1``.

    ``S1`` is a constant target here: only ``ds`` is returned.
    """
    return entropy_regression(s, negative_entropy(S1))


def entropy_regression(s, target):
    """Mean squared error of ``s`` against a fixed target vector; returns ``(loss, ds)``."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    gap = s - np.asarray(target, dtype=np.float64).reshape(-1)
    return float(np.mean(gap**2)), 2.0 * gap / len(s)


def hybrid_labels(S, gt_src, tgt_pts, r: float, match_idx=None) -> np.ndarray:
    """1.0 where the row's argmax target lies within ``r`` of the true image, else 0.0."""
    if match_idx is None:
        match_idx = np.argmax(np.asarray(S), axis=1)
    diff = np.asarray(gt_src, dtype=np.float64) - np.asarray(tgt_pts, dtype=np.float64)[match_idx]
    return ((diff * diff).sum(axis=1) <= r * r).astype(np.float64)


def hybrid_loss(v, S, gt_src, tgt_pts, r: float, match_idx=None):
    """Binary cross-entropy of validity scores against match-correctness labels.

    Returns ``(loss, dv, labels)``.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    labels = hybrid_labels(S, gt_src, tgt_pts, r, match_idx)
    vc = np.clip(v, V_CLAMP, 1.0 - V_CLAMP)
    M = len(v)
    loss = float(np.mean(-labels * np.log(vc) - (1.0 - labels) * np.log(1.0 - vc)))
    dv = (-labels / vc + (1.0 - labels) / (1.0 - vc)) / M
    return loss, dv, labels


def positive_mask(src, tgt, gt: RigidTransform, r: float, tgt_index: SpatialIndex | None = None) -> np.ndarray:
    """Source points whose true image has a target point within ``r``."""
    index = tgt_index or SpatialIndex(tgt)
    _, dist = index.nearest(gt.apply(src))
    return dist * dist <= r * r


def balanced_sample(src, tgt, gt: RigidTransform, M: int, r: float, rng: np.random.Generator, tgt_index=None):
    """Half "positive", half "negative" source points plus their closest true targets.

    Returns ``(src_idx, tgt_idx)``: ``M`` distinct source indices (positive
    phase first) and, for each, the index of the target point closest to its
    ground-truth image.
    """
    src = as_points(src, "source")
    tgt = as_points(tgt, "target")
    n = len(src)
    if not 1 <= M <= n:
        raise ValueError(f"sample size {M} must be in [1, {n}]")
    index = tgt_index or SpatialIndex(tgt)
    nearest, dist = index.nearest(gt.apply(src))
    pos = (dist * dist <= r * r).astype(np.float64)

    n_pos = math.ceil(M / 2)
    p = pos + SAMPLING_EPS
    first = rng.choice(n, size=n_pos, replace=False, p=p / p.sum())
    remaining = np.setdiff1d(np.arange(n), first)
    q = (1.0 - pos[remaining]) + SAMPLING_EPS
    second = rng.choice(remaining, size=M - n_pos, replace=False, p=q / q.sum())
    src_idx = np.concatenate([first, second]).astype(np.int64)
    return src_idx, nearest[src_idx]
