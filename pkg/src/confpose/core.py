"""Shared domain types: cameras, poses, keypoints, ellipsoids.

Rotations use the intrinsic ZYX (yaw-pitch-roll) Euler convention,
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Poses map object-frame points into
the camera frame, ``X_cam = R @ X_obj + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from confpose.errors import (
    BehindCamera,
    DegenerateCovariance,
    DegenerateModel,
    DegenerateShape,
    LengthMismatch,
    NotARotation,
)

EULER_CONVENTION = "ZYX-intrinsic"
DEPTH_EPS = 1e-9
GIMBAL_TOL = 1e-6


def _frozen_array(value, shape=None, name="array"):
    arr = np.array(value, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


def wrap_angle(angle):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(angle, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def wrap_difference(angle):
    """Shortest signed angular difference, mapped to (-pi, pi]."""
    return -wrap_angle(-np.asarray(angle, dtype=float))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("camera intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose6D:
    """Euler angles (yaw, pitch, roll) in radians and a translation in meters."""

    euler: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        euler = _frozen_array(self.euler, (3,), "euler")
        trans = _frozen_array(self.translation, (3,), "translation")
        if not (-np.pi <= euler[0] < np.pi and -np.pi <= euler[2] < np.pi):
            raise ValueError(f"yaw and roll must lie in [-pi, pi), got {euler}")
        if not -np.pi / 2 <= euler[1] <= np.pi / 2:
            raise ValueError(f"pitch must lie in [-pi/2, pi/2], got {euler[1]}")
        object.__setattr__(self, "euler", euler)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def from_vector(cls, y) -> "Pose6D":
        """Build a pose from an unconstrained 6-vector, canonicalizing the angles."""
        y = np.asarray(y, dtype=float)
        euler = y[:3]
        if abs(euler[1]) > np.pi / 2:
            euler = matrix_to_euler(euler_to_matrix(euler))
        else:
            euler = wrap_angle(euler)
        return cls(euler, y[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.euler, self.translation])

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.euler)

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class GaussianKeypoint:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, (2,), "mean")
        cov = _frozen_array(self.cov, (2, 2), "cov")
        _check_spd2(cov[None])
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def _check_spd2(covs: np.ndarray) -> None:
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    if not np.allclose(covs[:, 0, 1], covs[:, 1, 0], rtol=1e-12, atol=0.0):
        raise DegenerateCovariance("covariance must be symmetric")
    det = a * c - b * b
    bad = np.flatnonzero((a <= 0) | (det <= 0))
    if bad.size:
        raise DegenerateCovariance(f"covariance of keypoint {int(bad[0])} is not positive definite")


@dataclass(frozen=True)
class GaussianKeypointSet:
    """N predicted keypoints, stored as stacked arrays.

    ``means`` has shape (N, 2), ``covs`` has shape (N, 2, 2).
    """

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = _frozen_array(self.means, name="means")
        covs = _frozen_array(self.covs, name="covs")
        if means.ndim != 2 or means.shape[1] != 2 or means.shape[0] < 1:
            raise ValueError(f"means must have shape (N, 2), got {means.shape}")
        if covs.shape != (means.shape[0], 2, 2):
            raise LengthMismatch(f"covs must have shape ({means.shape[0]}, 2, 2), got {covs.shape}")
        _check_spd2(covs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @classmethod
    def from_keypoints(cls, keypoints: Sequence[GaussianKeypoint]) -> "GaussianKeypointSet":
        return cls(np.array([k.mean for k in keypoints]), np.array([k.cov for k in keypoints]))

    @classmethod
    def isotropic(cls, means, variances) -> "GaussianKeypointSet":
        variances = np.asarray(variances, dtype=float)
        return cls(means, variances[:, None, None] * np.eye(2))

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, n: int) -> GaussianKeypoint:
        return GaussianKeypoint(self.means[n], self.covs[n])

    @property
    def keypoints(self) -> list[GaussianKeypoint]:
        return [self[n] for n in range(len(self))]

    def inverse_covs(self) -> np.ndarray:
        a, b, c = self.covs[:, 0, 0], self.covs[:, 0, 1], self.covs[:, 1, 1]
        det = a * c - b * b
        inv = np.empty_like(self.covs)
        inv[:, 0, 0] = c / det
        inv[:, 1, 1] = a / det
        inv[:, 0, 1] = inv[:, 1, 0] = -b / det
        return inv


@dataclass(frozen=True)
class ObjectModel:
    points3d: np.ndarray

    def __post_init__(self):
        pts = _frozen_array(self.points3d, name="points3d")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points3d must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 4:
            raise DegenerateModel("an object model needs at least 4 points")
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[0] == 0.0 or sv[2] <= 1e-12 * sv[0]:
            raise DegenerateModel("model points are coplanar")
        object.__setattr__(self, "points3d", pts)

    def __len__(self) -> int:
        return self.points3d.shape[0]


@dataclass(frozen=True)
class Ellipsoid3:
    """Region ``{x : (x - center)^T shape^-1 (x - center) <= scale}``."""

    center: np.ndarray
    shape: np.ndarray
    scale: float = 1.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        center = _frozen_array(self.center, (3,), "center")
        shape = _frozen_array(self.shape, (3, 3), "shape")
        if not np.allclose(shape, shape.T, rtol=1e-9, atol=0.0):
            raise DegenerateShape("ellipsoid shape must be symmetric")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("ellipsoid scale must be positive")
        try:
            chol = np.linalg.cholesky(shape)
        except np.linalg.LinAlgError as exc:
            raise DegenerateShape("ellipsoid shape is not positive definite") from exc
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "_chol", chol)

    def mahalanobis2(self, x, wrap: bool = False) -> float:
        d = np.asarray(x, dtype=float) - self.center
        if wrap:
            d = wrap_difference(d)
        z = np.linalg.solve(self._chol, d)
        return float(z @ z)

    def contains(self, x, wrap: bool = False) -> bool:
        return self.mahalanobis2(x, wrap=wrap) <= self.scale


def euler_to_matrix(euler) -> np.ndarray:
    yaw, pitch, roll = (float(v) for v in euler)
    ca, sa = math.cos(yaw), math.sin(yaw)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cc, sc = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    )


def matrix_to_euler(R, *, with_flag: bool = False):
    """Invert :func:`euler_to_matrix`.

    Pitch is taken in [-pi/2, pi/2]. Within ``GIMBAL_TOL`` of +-pi/2 the yaw is
    fixed to zero and the roll carries the remaining angle; pass
    ``with_flag=True`` to also receive that gimbal-lock flag.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation("expected a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-6 or np.linalg.det(R) <= 0:
        raise NotARotation("matrix is not a proper rotation")
    pitch = math.atan2(-R[2, 0], math.hypot(R[0, 0], R[1, 0]))
    locked = abs(abs(pitch) - math.pi / 2) <= GIMBAL_TOL
    if locked:
        yaw = 0.0
        if pitch > 0:
            roll = math.atan2(R[0, 1], R[1, 1])
        else:
            roll = math.atan2(-R[0, 1], R[1, 1])
    else:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    euler = wrap_angle(np.array([yaw, pitch, roll]))
    euler[1] = pitch
    return (euler, locked) if with_flag else euler


def project(point3d, pose: Pose6D, cam: CameraIntrinsics) -> np.ndarray:
    X, Y, depth = pose.transform(point3d)
    if not depth > DEPTH_EPS:
        raise BehindCamera(f"point at depth {depth:.3g} is behind the camera")
    return np.array([cam.fx * X / depth + cam.cx, cam.fy * Y / depth + cam.cy])


def project_points(points3d, pose: Pose6D, cam: CameraIntrinsics) -> np.ndarray:
    P = pose.transform(points3d)
    if np.any(P[:, 2] <= DEPTH_EPS):
        raise BehindCamera("a point is behind the camera")
    return np.column_stack([cam.fx * P[:, 0] / P[:, 2] + cam.cx, cam.fy * P[:, 1] / P[:, 2] + cam.cy])
