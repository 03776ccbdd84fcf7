"""Rigid transforms, point-cloud helpers and the rotation/translation error metrics.

Point clouds are plain ``(N, 3)`` float64 arrays throughout the package;
:func:`as_points` is the single place where that contract is checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-9


def as_points(points, name: str = "points") -> np.ndarray:
    """Return ``points`` as a contiguous ``(N, 3)`` float64 array, N >= 1, all finite."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation plus translation; maps ``p`` to ``R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_row12(cls, values: Sequence[float]) -> RigidTransform:
        """Inverse of :meth:`to_row12` (row-major R, then t)."""
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.shape != (12,):
            raise ValueError(f"expected 12 numbers, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_row12(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, inner: RigidTransform) -> RigidTransform:
        return compose(self, inner)

    def __repr__(self) -> str:
        euler = np.round(rotation_to_euler_deg(self.rotation), 4)
        return f"RigidTransform(euler_zyx_deg={euler.tolist()}, t={np.round(self.translation, 6).tolist()})"


def apply_transform(t: RigidTransform, pc) -> np.ndarray:
    return t.apply(as_points(pc))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform that applies ``inner`` first, then ``outer``."""
    R = outer.rotation @ inner.rotation
    # re-orthonormalize so long folds never drift past the invariant tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, outer.rotation @ inner.translation + outer.translation)


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_deg_to_rotation(angles) -> np.ndarray:
    """``(yaw, pitch, roll)`` in degrees to ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    yaw, pitch, roll = np.asarray(angles, dtype=np.float64)
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def rotation_to_euler_deg(r) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles ``(yaw, pitch, roll)`` in degrees.

    Yaw and roll lie in (-180, 180], pitch in [-90, 90]. At gimbal lock
    (``|r[2, 0]| >= 1 - 1e-9``) roll is set to 0 and the whole in-plane
    rotation is reported as yaw.
    """
    r = np.asarray(r, dtype=np.float64)
    sp = -r[2, 0]
    if abs(sp) >= 1.0 - GIMBAL_TOL:
        pitch = np.copysign(np.pi / 2, sp)
        yaw = np.arctan2(-r[0, 1], r[1, 1])
        roll = 0.0
    else:
        pitch = np.arcsin(np.clip(sp, -1.0, 1.0))
        yaw = np.arctan2(r[1, 0], r[0, 0])
        roll = np.arctan2(r[2, 1], r[2, 2])
    out = np.rad2deg(np.array([yaw, pitch, roll], dtype=np.float64))
    out[[0, 2]] = np.where(out[[0, 2]] <= -180.0, out[[0, 2]] + 360.0, out[[0, 2]])
    return out


def rotation_angle_deg(r) -> float:
    """Geodesic angle of a rotation matrix, well conditioned near zero."""
    r = np.asarray(r, dtype=np.float64)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.rad2deg(np.arctan2(0.5 * np.linalg.norm(axis), 0.5 * (np.trace(r) - 1.0))))


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    """Angle of the relative rotation between two transforms."""
    return rotation_angle_deg(a.rotation.T @ b.rotation)


@dataclass(frozen=True)
class RegistrationMetrics:
    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float


def compute_metrics(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> RegistrationMetrics:
    """Pooled RMSE/MAE over Euler-angle and translation-component differences.

    Rotation errors are the per-angle differences of the Z-Y-X Euler
    decompositions (samples x 3 pool); translation errors are per component.
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground truths")
    if not pred:
        raise ValueError("no transforms to evaluate")
    rot_err = np.array([rotation_to_euler_deg(p.rotation) - rotation_to_euler_deg(g.rotation) for p, g in zip(pred, gt)])
    trans_err = np.array([p.translation - g.translation for p, g in zip(pred, gt)])
    return RegistrationMetrics(
        rmse_rot_deg=float(np.sqrt(np.mean(rot_err**2))),
        mae_rot_deg=float(np.mean(np.abs(rot_err))),
        rmse_trans=float(np.sqrt(np.mean(trans_err**2))),
        mae_trans=float(np.mean(np.abs(trans_err))),
    )


def random_transform(rot_max_deg: float, trans_max: float, rng: np.random.Generator) -> RigidTransform:
    """Rz(a) Ry(b) Rx(c) with a, b, c ~ U[0, rot_max_deg]; t ~ U[-trans_max, trans_max]^3."""
    if rot_max_deg < 0:
        raise ValueError("rot_max_deg must be >= 0")
    angles = rng.uniform(0.0, rot_max_deg, size=3)
    t = rng.uniform(-trans_max, trans_max, size=3)
    return RigidTransform(euler_deg_to_rotation(angles), t)
