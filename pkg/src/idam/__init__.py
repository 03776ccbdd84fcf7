"""Rigid point-cloud registration with learned distance-aware similarity matching."""

from .geometry import RegistrationMetrics, RigidTransform, compute_metrics, random_transform
from .icp import IcpConfig, icp_register
from .pipeline import IdamConfig, IdamModel, RegistrationResult, register
from .procrustes import solve_weighted_procrustes

__version__ = "0.1.0"
