"""Distance-aware similarity matching with two-stage point elimination (inference path).

Shapes used below: ``M`` kept points per cloud, ``K`` descriptor width,
``C = 2K + 4`` channels of the pairwise tensor, ``H`` width of the similarity
head's penultimate layer (the pairwise intermediate features).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchitectureMismatchError, ConfigError, DegenerateConfigurationError
from .geometry import RigidTransform, as_points, compose
from .nn import Mlp, load_params, mlp_forward, row_softmax, save_params
from .procrustes import solve_weighted_procrustes

COINCIDENT_EPS = 1e-12


@dataclass(frozen=True)
class IdamConfig:
    feature_dim: int = 33
    pair_dim: int = 32
    n_iter: int = 3
    match_radius: float = 0.1
    keep_ratio: float = 1.0 / 6.0
    hybrid: bool = True  # False: uniform Procrustes weights (ablation)
    feature_scale: float = 1.0

    def __post_init__(self):
        if self.feature_dim < 1 or self.pair_dim < 1:
            raise ConfigError("feature_dim and pair_dim must be >= 1")
        if self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1")
        if not self.match_radius > 0:
            raise ConfigError("match_radius must be > 0")
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError("keep_ratio must be in (0, 1]")

    @property
    def channels(self) -> int:
        return 2 * self.feature_dim + 4

    def keep_count(self, n: int) -> int:
        # round() guards against 768 * (1/6) landing a hair above 128
        return min(n, math.ceil(round(n * self.keep_ratio, 9)))


@dataclass
class IdamModel:
    config: IdamConfig
    similarity: Mlp
    significance: Mlp
    validity: Mlp
    epochs_trained: int = 0

    @classmethod
    def init(cls, config: IdamConfig = IdamConfig(), seed: int = 0) -> IdamModel:
        rng = np.random.default_rng(seed)
        K, H = config.feature_dim, config.pair_dim
        return cls(
            config,
            similarity=Mlp.init([config.channels, 64, H, 1], rng),
            significance=Mlp.init([K, 64, 32, 1], rng),
            validity=Mlp.init([H, 32, 1], rng, output="sigmoid"),
        )

    def heads(self) -> dict[str, Mlp]:
        return {"similarity": self.similarity, "significance": self.significance, "validity": self.validity}

    def arrays(self) -> list[np.ndarray]:
        return [a for mlp in self.heads().values() for a in mlp.arrays()]

    def with_config(self, **changes) -> IdamModel:
        """Same weights, different inference settings (n_iter, hybrid, ...)."""
        cfg = IdamConfig(**{**asdict(self.config), **changes})
        if cfg.feature_dim != self.config.feature_dim or cfg.pair_dim != self.config.pair_dim:
            raise ConfigError("cannot change head dimensions of a built model")
        return IdamModel(cfg, self.similarity, self.significance, self.validity, self.epochs_trained)

    def save(self, path) -> None:
        meta = {"model": asdict(self.config), "epochs_trained": self.epochs_trained}
        save_params(path, self.heads(), meta)

    @classmethod
    def load(cls, path, expect: IdamConfig | None = None) -> IdamModel:
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        heads, meta = load_params(path)
        cfg = IdamConfig(**meta["model"])
        if expect is not None and (expect.feature_dim, expect.pair_dim) != (cfg.feature_dim, cfg.pair_dim):
            raise ArchitectureMismatchError(
                f"checkpoint has feature_dim={cfg.feature_dim}, pair_dim={cfg.pair_dim}; "
                f"expected {expect.feature_dim}, {expect.pair_dim}"
            )
        template = cls.init(cfg)
        heads, _ = load_params(path, expected=template.heads())
        return cls(cfg, heads["similarity"], heads["significance"], heads["validity"], meta.get("epochs_trained", 0))


@dataclass
class RegistrationResult:
    transform: RigidTransform
    iterations: list[RigidTransform] = field(default_factory=list)
    # per iteration: (source indices, matched target indices, weights), indices into the input clouds
    correspondences: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    src_kept: np.ndarray | None = None
    tgt_kept: np.ndarray | None = None
    src_significance: np.ndarray | None = None
    tgt_significance: np.ndarray | None = None
    validity: list[np.ndarray] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    converged: bool = False


def significance_scores(model: IdamModel, feats) -> np.ndarray:
    y, _ = mlp_forward(model.significance, np.asarray(feats, dtype=np.float64) * model.config.feature_scale)
    return y[:, 0]


def top_k_indices(scores, keep: int) -> np.ndarray:
    """Indices of the ``keep`` largest scores (ties -> lower index), sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= keep <= len(scores):
        raise ValueError(f"keep must be in [1, {len(scores)}], got {keep}")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:keep])


def hard_eliminate(feats, model: IdamModel, keep: int) -> np.ndarray:
    """Keep the ``keep`` points with highest significance score."""
    n = len(feats)
    if not 3 <= keep <= n:
        raise ValueError(f"keep must be in [3, {n}], got {keep}")
    return top_k_indices(significance_scores(model, feats), keep)


def build_augmented_tensor(src_pts, tgt_pts, src_feat, tgt_feat) -> np.ndarray:
    """``(Ms, Mt, 2K+4)`` tensor: [u_src(i); u_tgt(j); |p_i - q_j|; (p_i - q_j)/|p_i - q_j|]."""
    src_pts = np.asarray(src_pts, dtype=np.float64)
    tgt_pts = np.asarray(tgt_pts, dtype=np.float64)
    src_feat = np.asarray(src_feat, dtype=np.float64)
    tgt_feat = np.asarray(tgt_feat, dtype=np.float64)
    if len(src_pts) != len(src_feat) or len(tgt_pts) != len(tgt_feat):
        raise ValueError("point and feature row counts differ")
    if src_feat.shape[1] != tgt_feat.shape[1]:
        raise ValueError("source and target feature widths differ")
    ms, mt, K = len(src_pts), len(tgt_pts), src_feat.shape[1]
    out = np.empty((ms, mt, 2 * K + 4))
    out[:, :, :K] = src_feat[:, None, :]
    out[:, :, K : 2 * K] = tgt_feat[None, :, :]
    diff = src_pts[:, None, :] - tgt_pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    out[:, :, 2 * K] = dist
    scale = np.where(dist < COINCIDENT_EPS, 0.0, 1.0 / np.maximum(dist, COINCIDENT_EPS))
    out[:, :, 2 * K + 1 :] = diff * scale[:, :, None]
    return out


def _scaled_tensor(model: IdamModel, tensor: np.ndarray) -> np.ndarray:
    s = model.config.feature_scale
    if s == 1.0:
        return tensor
    K = model.config.feature_dim
    out = tensor.copy()
    out[:, :, : 2 * K] *= s
    return out


def similarity_forward(tensor, model: IdamModel):
    """Apply the similarity head at every (i, j).

    Returns ``(S, F, cache)``: the row-stochastic similarity matrix, the
    ``(Ms, Mt, H)`` penultimate activations, and the MLP cache for backprop.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[2] != model.config.channels:
        raise ValueError(f"tensor shape {tensor.shape} does not match {model.config.channels} channels")
    ms, mt, c = tensor.shape
    y, cache = mlp_forward(model.similarity, _scaled_tensor(model, tensor).reshape(ms * mt, c))
    logits = y.reshape(ms, mt)
    F = cache.acts[-1].reshape(ms, mt, -1)
    return row_softmax(logits), F, cache


def pick_correspondences(S, tgt_pts) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise argmax of ``S`` (ties -> lower column); returns ``(matched points, indices)``."""
    idx = np.argmax(np.asarray(S), axis=1)
    return np.asarray(tgt_pts, dtype=np.float64)[idx], idx


def median_mask(v) -> np.ndarray:
    """True where ``v`` is at least the upper median (the (floor(M/2)+1)-th smallest value).

    With distinct scores this zeroes exactly floor(M/2) entries and keeps ceil(M/2).
    """
    v = np.asarray(v, dtype=np.float64)
    median = np.sort(v)[len(v) // 2]
    return v >= median


def elimination_weights(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    kept = v * median_mask(v)
    total = kept.sum()
    if not total > 0:
        raise ValueError("no validity mass survives elimination")
    return kept / total


def validity_scores(F, model: IdamModel):
    """Max-pool the pairwise features over targets and score each source point.

    Returns ``(v, pool_idx, cache)``; ``pool_idx`` records which target won
    each pooled channel (needed for backprop).
    """
    F = np.asarray(F, dtype=np.float64)
    pool_idx = F.argmax(axis=1)
    pooled = np.take_along_axis(F, pool_idx[:, None, :], axis=1)[:, 0, :]
    y, cache = mlp_forward(model.validity, pooled)
    return y[:, 0], pool_idx, cache


def hybrid_weights(F, model: IdamModel) -> tuple[np.ndarray, np.ndarray]:
    """Validity scores ``v`` and the median-thresholded Procrustes weights ``w``."""
    v, _, _ = validity_scores(F, model)
    return v, elimination_weights(v)


def register(src, tgt, src_feat, tgt_feat, model: IdamModel) -> RegistrationResult:
    """Estimate the rigid transform taking ``src`` onto ``tgt``."""
    src = as_points(src, "source")
    tgt = as_points(tgt, "target")
    cfg = model.config
    ks, kt = cfg.keep_count(len(src)), cfg.keep_count(len(tgt))
    if ks < 3 or kt < 3:
        raise ValueError(f"clouds too small for registration ({len(src)} and {len(tgt)} points)")
    src_feat = np.asarray(src_feat, dtype=np.float64)
    tgt_feat = np.asarray(tgt_feat, dtype=np.float64)

    sig_src = significance_scores(model, src_feat)
    sig_tgt = significance_scores(model, tgt_feat)
    src_keep = top_k_indices(sig_src, ks)
    tgt_keep = top_k_indices(sig_tgt, kt)
    fs, ft = src_feat[src_keep], tgt_feat[tgt_keep]
    tgt_pts = tgt[tgt_keep]
    current = src[src_keep]

    result = RegistrationResult(
        transform=RigidTransform.identity(),
        src_kept=src_keep,
        tgt_kept=tgt_keep,
        src_significance=sig_src[src_keep],
        tgt_significance=sig_tgt[tgt_keep],
    )
    total = RigidTransform.identity()
    for _ in range(cfg.n_iter):
        S, F, _ = similarity_forward(build_augmented_tensor(current, tgt_pts, fs, ft), model)
        matched, idx = pick_correspondences(S, tgt_pts)
        v, _, _ = validity_scores(F, model)
        w = elimination_weights(v) if cfg.hybrid else np.full(len(v), 1.0 / len(v))
        try:
            step = solve_weighted_procrustes(current, matched, w)
        except DegenerateConfigurationError:
            step = RigidTransform.identity()
        current = step.apply(current)
        total = compose(step, total)
        result.iterations.append(step)
        result.correspondences.append((src_keep, tgt_keep[idx], w))
        result.validity.append(v)
    result.transform = total
    return result


def fold_transforms(steps) -> RigidTransform:
    total = RigidTransform.identity()
    for step in steps:
        total = compose(step, total)
    return total

