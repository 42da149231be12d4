"""Implicit differentiation of the PnP optimum and covariance propagation.

At a stationary point of ``O(x, y) = sum_n |x_n - pi_n(y)|^2`` the constraint
``f = dO/dy`` vanishes, so the pose moves with the keypoints as
``dy/dx = -(df/dy)^-1 df/dx``. Keypoint covariance is pushed through that
Jacobian and the rotation / translation blocks become 3D ellipsoids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from confpose import kernels
from confpose.conformal import KeypointConfidenceRegion
from confpose.core import DEPTH_EPS, Ellipsoid3, Pose6D
from confpose.errors import (
    BehindCamera,
    DimensionMismatch,
    IllConditioned,
    LengthMismatch,
    NotStationary,
)
from confpose.pnp import LEAST_SQUARES, PnPProblem, PnPSolution, solve

STATIONARITY_TOL = 1e-6
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class KeypointCovariance:
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.array(self.blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1:] != (2, 2):
            raise DimensionMismatch(f"blocks must have shape (N, 2, 2), got {blocks.shape}")
        if not np.allclose(blocks, blocks.transpose(0, 2, 1), rtol=1e-12, atol=0.0):
            raise ValueError("covariance blocks must be symmetric")
        det = blocks[:, 0, 0] * blocks[:, 1, 1] - blocks[:, 0, 1] ** 2
        if np.any(blocks[:, 0, 0] <= 0) or np.any(det <= 0):
            raise ValueError("covariance blocks must be positive definite")
        blocks.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    def __len__(self) -> int:
        return self.blocks.shape[0]

    def dense(self) -> np.ndarray:
        n = len(self)
        out = np.zeros((2 * n, 2 * n))
        for i in range(n):
            out[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = self.blocks[i]
        return out


@dataclass(frozen=True)
class PoseCovariance:
    full: np.ndarray

    @property
    def rot_block(self) -> np.ndarray:
        return self.full[:3, :3]

    @property
    def trans_block(self) -> np.ndarray:
        return self.full[3:, 3:]


@dataclass(frozen=True)
class PoseConfidenceRegion:
    rotation: Ellipsoid3
    translation: Ellipsoid3
    epsilon: float
    chi2_calibrated: bool = True
    covariance: PoseCovariance | None = None


def _terms(problem: PnPProblem, pose: Pose6D | np.ndarray):
    y = pose.as_vector() if isinstance(pose, Pose6D) else np.asarray(pose, dtype=float)
    uv, jac, depth = kernels.project_jacobian(problem.model.points3d, y, problem.cam.as_array())
    if np.any(depth <= DEPTH_EPS):
        raise BehindCamera("a model point is behind the camera")
    return problem.observations.means - uv, jac


def objective(problem: PnPProblem, pose) -> float:
    r, _ = _terms(problem, pose)
    return float(np.sum(r * r))


def constraint(problem: PnPProblem, pose) -> np.ndarray:
    """Gradient of the unweighted squared reprojection error with respect to the pose."""
    r, jac = _terms(problem, pose)
    return -2.0 * np.einsum("nij,ni->j", jac, r)


def gauss_newton_term(problem: PnPProblem, pose) -> np.ndarray:
    _, jac = _terms(problem, pose)
    return 2.0 * np.einsum("nki,nkj->ij", jac, jac)


def curvature_term(problem: PnPProblem, pose) -> np.ndarray:
    """``2 sum_n sum_k r_nk d2 pi_nk / dy2``.

    Computed as a central difference of ``J(y)^T r`` with the residual frozen
    at ``pose``, then symmetrized.
    """
    y = pose.as_vector() if isinstance(pose, Pose6D) else np.asarray(pose, dtype=float)
    r0, _ = _terms(problem, y)
    C = np.empty((6, 6))
    for j in range(6):
        h = 1e-6 * (1.0 + abs(y[j]))
        step = np.zeros(6)
        step[j] = h
        _, jp = _terms(problem, y + step)
        _, jm = _terms(problem, y - step)
        C[:, j] = np.einsum("nij,ni->j", jp - jm, r0) / (2.0 * h)
    return C + C.T


def dfdy(problem: PnPProblem, pose) -> np.ndarray:
    return gauss_newton_term(problem, pose) - curvature_term(problem, pose)


def dfdx(problem: PnPProblem, pose) -> np.ndarray:
    """6 x 2N; observation n only enters columns 2n and 2n+1."""
    _, jac = _terms(problem, pose)
    return -2.0 * jac.transpose(2, 0, 1).reshape(6, -1)


def pose_jacobian(problem: PnPProblem, pose, stationarity_tol: float = STATIONARITY_TOL) -> np.ndarray:
    """d(pose)/d(keypoints) at a stationary pose, shape 6 x 2N."""
    f = constraint(problem, pose)
    scale = max(1.0, objective(problem, pose))
    if np.linalg.norm(f) > stationarity_tol * scale:
        raise NotStationary(
            f"|df/dy| = {np.linalg.norm(f):.3g} exceeds {stationarity_tol:g} x {scale:.3g}; "
            "solve to convergence first"
        )
    A = dfdy(problem, pose)
    cond = np.linalg.cond(A)
    if not cond <= MAX_CONDITION:
        raise IllConditioned(f"df/dy has condition number {cond:.3g}", cond)
    return -np.linalg.solve(A, dfdx(problem, pose))


def propagate(J, kp_cov: KeypointCovariance) -> PoseCovariance:
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != 6 or J.shape[1] != 2 * len(kp_cov):
        raise DimensionMismatch(f"Jacobian of shape {J.shape} does not match {len(kp_cov)} keypoints")
    Jb = J.reshape(6, -1, 2).transpose(1, 0, 2)  # (N, 6, 2)
    S = np.einsum("nia,nab,njb->ij", Jb, kp_cov.blocks, Jb)
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() < 0.0:
        S = (V * np.clip(w, 0.0, None)) @ V.T
        S = 0.5 * (S + S.T)
    return PoseCovariance(S)


def gaussian_radius_factor(epsilon: float) -> float:
    """sqrt of the chi-square(2) quantile at 1 - epsilon."""
    return math.sqrt(-2.0 * math.log(epsilon))


def ellipsoid_scale(epsilon: float, chi2_calibrated: bool) -> float:
    return float(chi2.ppf(1.0 - epsilon, 3)) if chi2_calibrated else 1.0


def keypoint_covariance_from_region(region2d: KeypointConfidenceRegion, epsilon: float, kappa: float | None = None):
    """Isotropic blocks ``(radius / kappa)^2 I`` whose 1 - epsilon contour is the ball."""
    kappa = gaussian_radius_factor(epsilon) if kappa is None else kappa
    var = (np.asarray(region2d.radii) / kappa) ** 2
    return KeypointCovariance(var[:, None, None] * np.eye(2))


def region_from_conformal(
    problem: PnPProblem,
    solution: PnPSolution,
    region2d: KeypointConfidenceRegion,
    epsilon: float,
    chi2_calibrated: bool = True,
    kappa: float | None = None,
    kp_cov_source: str = "conformal",
    refine: bool = True,
) -> PoseConfidenceRegion:
    """Rotation and translation ellipsoids around the least-squares optimum.

    The Jacobian belongs to the unweighted least-squares estimator, so the
    pose is first polished to that estimator's optimum (starting from
    ``solution.pose``) unless ``refine`` is False. ``kp_cov_source`` picks the
    keypoint covariance: ``"conformal"`` derives it from the calibrated balls,
    ``"predicted"`` uses the regressor's covariances directly.
    """
    if len(region2d) != len(problem):
        raise LengthMismatch("region and problem differ in keypoint count")
    pose = solve(problem, solution.pose, LEAST_SQUARES).pose if refine else solution.pose
    if kp_cov_source == "conformal":
        kp_cov = keypoint_covariance_from_region(region2d, epsilon, kappa)
    elif kp_cov_source == "predicted":
        kp_cov = KeypointCovariance(problem.observations.covs)
    else:
        raise ValueError(f"unknown kp_cov_source {kp_cov_source!r}")
    cov = propagate(pose_jacobian(problem, pose), kp_cov)
    scale = ellipsoid_scale(epsilon, chi2_calibrated)
    return PoseConfidenceRegion(
        Ellipsoid3(pose.euler, cov.rot_block, scale),
        Ellipsoid3(pose.translation, cov.trans_block, scale),
        float(epsilon),
        bool(chi2_calibrated),
        cov,
    )
