"""End-to-end training of the similarity, significance and validity heads."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfigurationError, TrainingError
from .features import FeatureExtractor, extract
from .geometry import RigidTransform
from .losses import (
    balanced_sample,
    entropy_regression,
    hybrid_loss,
    matching_logit_grad,
    matching_targets,
    negative_entropy,
)
from .neighbors import SpatialIndex
from .nn import AdamState, adam_step, mlp_backward, mlp_forward
from .pipeline import (
    IdamModel,
    build_augmented_tensor,
    elimination_weights,
    similarity_forward,
    validity_scores,
)
from .procrustes import solve_weighted_procrustes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-4
    lr_decay_epoch: int = 30  # lr is multiplied by lr_decay for epochs after this one
    lr_decay: float = 0.1
    weight_decay: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * (self.lr_decay if epoch > self.lr_decay_epoch else 1.0)


@dataclass
class TrainingSample:
    """Sampled sets for one pair: original source positions, targets, their features, truth."""

    src_pts: np.ndarray
    tgt_pts: np.ndarray
    src_feat: np.ndarray
    tgt_feat: np.ndarray
    gt: RigidTransform


@dataclass
class StepTrace:
    """Discrete decisions of one forward pass; passing it back in replays them exactly."""

    transforms: list[RigidTransform] = field(default_factory=list)
    match_idx: list[np.ndarray] = field(default_factory=list)
    pool_idx: list[np.ndarray] = field(default_factory=list)
    entropy_target: np.ndarray | None = None


def pair_loss_and_grads(model: IdamModel, sample: TrainingSample, trace: StepTrace | None = None):
    """Total loss on one sampled pair and its gradient for every model array.

    Total = mean over iterations of the matching loss + first-iteration
    negative-entropy loss + mean over iterations of the hybrid loss. The
    per-iteration Procrustes updates are treated as constants.

    Returns ``(losses, grads, trace)`` where ``grads`` aligns with
    ``model.arrays()``.
    """
    cfg = model.config
    n_iter = cfg.n_iter
    replay = trace is not None
    trace = trace or StepTrace()
    gt_src = sample.gt.apply(sample.src_pts)
    jstar, gate = matching_targets(gt_src, sample.tgt_pts, cfg.match_radius)

    g_sim = model.similarity.zeros_like()
    g_val = model.validity.zeros_like()
    pen = len(model.similarity.weights) - 1  # index of the penultimate activation in the cache
    losses = {"match": 0.0, "neg_entropy": 0.0, "hybrid": 0.0}

    s_out, s_cache = mlp_forward(model.significance, sample.src_feat * cfg.feature_scale)
    current = sample.src_pts
    ds = None
    for n in range(n_iter):
        tensor = build_augmented_tensor(current, sample.tgt_pts, sample.src_feat, sample.tgt_feat)
        S, F, cache = similarity_forward(tensor, model)
        M, Mt, H = F.shape

        losses["match"] += float(np.sum(-np.log(np.maximum(S[np.arange(M), jstar], 1e-300)) * gate) / M) / n_iter
        dlogits = matching_logit_grad(S, jstar, gate) / n_iter

        if n == 0:
            # S enters only as a constant target
            if not replay:
                trace.entropy_target = negative_entropy(S)
            ne, ds = entropy_regression(s_out[:, 0], trace.entropy_target)
            losses["neg_entropy"] = ne

        if replay:
            pool_idx = trace.pool_idx[n]
            pooled = np.take_along_axis(F, pool_idx[:, None, :], axis=1)[:, 0, :]
            v_out, v_cache = mlp_forward(model.validity, pooled)
            match_idx = trace.match_idx[n]
        else:
            _, pool_idx, v_cache = validity_scores(F, model)
            v_out = v_cache.y
            match_idx = np.argmax(S, axis=1)
            trace.pool_idx.append(pool_idx)
            trace.match_idx.append(match_idx)
        v = v_out[:, 0]
        hl, dv, _ = hybrid_loss(v, S, gt_src, sample.tgt_pts, cfg.match_radius, match_idx)
        losses["hybrid"] += hl / n_iter

        dpooled, gv = mlp_backward(model.validity, v_cache, (dv / n_iter)[:, None])
        dF = np.zeros_like(F)
        rows = np.arange(M)[:, None]
        cols = np.arange(H)[None, :]
        dF[rows, pool_idx, cols] = dpooled
        _, gs = mlp_backward(model.similarity, cache, dlogits.reshape(-1, 1), {pen: dF.reshape(M * Mt, H)})
        for acc, g in ((g_sim, gs), (g_val, gv)):
            for l in range(len(acc.weights)):
                acc.weights[l] += g.weights[l]
                acc.biases[l] += g.biases[l]

        if replay:
            step = trace.transforms[n]
        else:
            w = elimination_weights(v) if cfg.hybrid else None
            try:
                step = solve_weighted_procrustes(current, sample.tgt_pts[match_idx], w)
            except DegenerateConfigurationError:
                step = RigidTransform.identity()
            trace.transforms.append(step)
        current = step.apply(current)

    _, g_sig = mlp_backward(model.significance, s_cache, ds[:, None])
    losses["total"] = losses["match"] + losses["neg_entropy"] + losses["hybrid"]
    grads = g_sim.arrays() + g_sig.arrays() + g_val.arrays()
    return losses, grads, trace


def total_loss(model: IdamModel, sample: TrainingSample, trace: StepTrace) -> float:
    """Loss with every discrete decision replayed from ``trace`` (for gradient checks)."""
    losses, _, _ = pair_loss_and_grads(model, sample, trace)
    return losses["total"]


@dataclass
class PreparedPair:
    source: np.ndarray
    target: np.ndarray
    gt: RigidTransform
    src_feat: np.ndarray
    tgt_feat: np.ndarray
    tgt_index: SpatialIndex


def prepare_pairs(pairs, extractor: FeatureExtractor) -> list[PreparedPair]:
    """Extract features once per pair; they do not change across epochs."""
    out = []
    for p in pairs:
        out.append(
            PreparedPair(p.source, p.target, p.gt, extract(extractor, p.source), extract(extractor, p.target), SpatialIndex(p.target))
        )
    return out


def draw_sample(model: IdamModel, pair: PreparedPair, rng: np.random.Generator) -> TrainingSample:
    M = model.config.keep_count(len(pair.source))
    si, ti = balanced_sample(pair.source, pair.target, pair.gt, M, model.config.match_radius, rng, pair.tgt_index)
    return TrainingSample(pair.source[si], pair.target[ti], pair.src_feat[si], pair.tgt_feat[ti], pair.gt)


def train(pairs, extractor: FeatureExtractor | None, model: IdamModel, cfg: TrainConfig = TrainConfig(), progress=None):
    """Train ``model`` in place; returns ``(model, epoch_log)``.

    ``pairs`` are :class:`~idam.data.RegistrationPair` objects, or
    :class:`PreparedPair` objects when ``extractor`` is None. One Adam step
    per pair. ``epoch_log`` rows hold the per-epoch mean losses and wall time.
    """
    prepared = list(pairs) if extractor is None else prepare_pairs(pairs, extractor)
    if not prepared:
        raise TrainingError("empty training set")
    rng = np.random.default_rng([cfg.seed, model.epochs_trained])
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.arrays()
    epoch_log = []
    start = model.epochs_trained
    for epoch in range(start + 1, start + cfg.epochs + 1):
        t0 = time.perf_counter()
        state.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(prepared)) if cfg.shuffle else np.arange(len(prepared))
        sums = {"match": 0.0, "neg_entropy": 0.0, "hybrid": 0.0}
        for k in order:
            sample = draw_sample(model, prepared[k], rng)
            losses, grads, _ = pair_loss_and_grads(model, sample)
            if not all(np.isfinite(v) for v in losses.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, pair {k}: {losses}")
            adam_step(state, params, grads)
            for key in sums:
                sums[key] += losses[key]
        model.epochs_trained = epoch
        row = {
            "epoch": epoch,
            "match_loss": sums["match"] / len(prepared),
            "neg_entropy_loss": sums["neg_entropy"] / len(prepared),
            "hybrid_loss": sums["hybrid"] / len(prepared),
            "wall_seconds": time.perf_counter() - t0,
        }
        epoch_log.append(row)
        log.info("epoch %d lr=%.1e match=%.4f neg_entropy=%.4f hybrid=%.4f (%.1fs)", epoch, state.lr,
                 row["match_loss"], row["neg_entropy_loss"], row["hybrid_loss"], row["wall_seconds"])
        if progress:
            progress(row)
    return model, epoch_log
