"""Point-to-point ICP, optionally trimmed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import RigidTransform, as_points, compose, rotation_angle_deg
from .neighbors import SpatialIndex
from .pipeline import RegistrationResult
from .procrustes import solve_weighted_procrustes


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tol: float = 1e-6
    trim: float = 0.0  # fraction of worst residuals dropped each iteration

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not 0 <= self.trim < 1:
            raise ConfigError("trim must be in [0, 1)")


def icp_register(src, tgt, cfg: IcpConfig = IcpConfig()) -> RegistrationResult:
    """Alternate closest-point matching and Procrustes until the update is below ``tol``.

    ``result.objective[k]`` is the mean squared correspondence distance at the
    start of iteration ``k``; one extra entry after the last update.
    Stops when the incremental rotation (in degrees) and translation norm are
    both below ``tol``.
    """
    src = as_points(src, "source")
    tgt = as_points(tgt, "target")
    if len(src) < 3 or len(tgt) < 3:
        raise ValueError("ICP needs >= 3 points per cloud")
    index = SpatialIndex(tgt)
    n_keep = len(src) - int(np.floor(cfg.trim * len(src)))
    total = RigidTransform.identity()
    current = src
    result = RegistrationResult(transform=total)
    for _ in range(cfg.max_iterations):
        nn_idx, dist = index.nearest(current)
        result.objective.append(float(np.mean(dist**2)))
        sel = np.arange(len(src))
        if n_keep < len(src):
            sel = np.sort(np.lexsort((sel, dist))[:n_keep])
        step = solve_weighted_procrustes(current[sel], tgt[nn_idx[sel]])
        current = step.apply(current)
        total = compose(step, total)
        result.iterations.append(step)
        result.correspondences.append((sel, nn_idx[sel], np.full(len(sel), 1.0 / len(sel))))
        if rotation_angle_deg(step.rotation) < cfg.tol and np.linalg.norm(step.translation) < cfg.tol:
            result.converged = True
            break
    result.objective.append(float(np.mean(index.nearest(current)[1] ** 2)))
    result.transform = total
    return result
