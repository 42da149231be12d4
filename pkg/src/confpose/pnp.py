"""Single-shot weighted PnP.

The pose minimizes ``sum_n huber(r_n^T W_n r_n)`` where ``r_n`` is the
reprojection error of keypoint n and ``W_n`` its inverse predicted covariance.
The optimizer is Levenberg-damped Gauss-Newton with the Huber derivative as
per-keypoint reweighting; the inner loop lives in :mod:`confpose.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from confpose import kernels
from confpose.core import (
    DEPTH_EPS,
    CameraIntrinsics,
    GaussianKeypointSet,
    ObjectModel,
    Pose6D,
    matrix_to_euler,
    project,
)
from confpose.errors import (
    AllPointsBehindCamera,
    BehindCamera,
    DegenerateModel,
    LengthMismatch,
    SingularNormalEquations,
)


@dataclass(frozen=True)
class PnPProblem:
    model: ObjectModel
    observations: GaussianKeypointSet
    cam: CameraIntrinsics

    def __post_init__(self):
        if len(self.model) != len(self.observations):
            raise LengthMismatch(
                f"model has {len(self.model)} points but {len(self.observations)} observations"
            )
        if len(self.model) < 4:
            raise DegenerateModel("PnP needs at least 4 correspondences")

    def __len__(self) -> int:
        return len(self.model)

    def with_means(self, means) -> "PnPProblem":
        """Same problem with the observed keypoint means replaced."""
        obs = GaussianKeypointSet(means, self.observations.covs)
        return replace(self, observations=obs)


@dataclass(frozen=True)
class SolverConfig:
    huber_delta: float = 1.0
    max_iters: int = 100
    grad_tol: float = 1e-10
    initial_damping: float = 1e-3
    use_weights: bool = True
    # "huber" is the robust weighted objective; "squared" is plain sum of r^T W r
    loss: str = "huber"
    step_tol: float = 1e-10

    def __post_init__(self):
        if self.loss not in ("huber", "squared"):
            raise ValueError(f"unknown loss {self.loss!r}")
        for name in ("huber_delta", "grad_tol", "initial_damping", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


# Unweighted sum of squared reprojection errors: the objective differentiated
# by the implicit-function machinery in confpose.ift.
LEAST_SQUARES = SolverConfig(use_weights=False, loss="squared")


@dataclass(frozen=True)
class PnPSolution:
    pose: Pose6D
    final_cost: float
    iterations: int
    gradient_norm: float
    converged: bool
    status: str = "converged"


_STATUS = {
    kernels.CONVERGED: "converged",
    kernels.MAX_ITERS: "max_iters",
    kernels.STALLED: "stalled",
}


def huber(e, delta: float):
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))


def _weights(problem: PnPProblem, cfg: SolverConfig) -> np.ndarray:
    if cfg.use_weights:
        return problem.observations.inverse_covs()
    return np.broadcast_to(np.eye(2), (len(problem), 2, 2)).copy()


def residual(problem: PnPProblem, pose: Pose6D, n: int) -> np.ndarray:
    return problem.observations.means[n] - project(problem.model.points3d[n], pose, problem.cam)


def residuals(problem: PnPProblem, pose: Pose6D) -> np.ndarray:
    uv, _, depth = kernels.project_jacobian(problem.model.points3d, pose.as_vector(), problem.cam.as_array())
    if np.any(depth <= DEPTH_EPS):
        raise BehindCamera("a model point is behind the camera")
    return problem.observations.means - uv


def weighted_cost(problem: PnPProblem, pose: Pose6D, cfg: SolverConfig = SolverConfig()) -> float:
    r = residuals(problem, pose)
    e = np.einsum("ni,nij,nj->n", r, _weights(problem, cfg), r)
    if cfg.loss == "squared":
        return float(e.sum())
    return float(huber(e, cfg.huber_delta).sum())


def solve(problem: PnPProblem, init: Pose6D | None = None, cfg: SolverConfig = SolverConfig()) -> PnPSolution:
    if init is None:
        init = initial_pose(problem)
    loss = kernels.LOSS_HUBER if cfg.loss == "huber" else kernels.LOSS_SQUARED
    y, cost, iters, gnorm, status = kernels.solve_pnp(
        problem.model.points3d,
        problem.observations.means,
        _weights(problem, cfg),
        init.as_vector(),
        problem.cam.as_array(),
        loss,
        cfg.huber_delta,
        cfg.max_iters,
        cfg.grad_tol,
        cfg.initial_damping,
        cfg.step_tol,
    )
    if status == kernels.BEHIND_AT_INIT:
        raise AllPointsBehindCamera("initial pose places model points behind the camera")
    if status == kernels.SINGULAR:
        raise SingularNormalEquations(
            f"damped normal equations became singular after {iters} iterations"
        )
    converged = status == kernels.CONVERGED or gnorm <= cfg.grad_tol * max(1.0, cost)
    return PnPSolution(Pose6D.from_vector(y), float(cost), int(iters), float(gnorm), bool(converged), _STATUS[status])


def _normalized(problem: PnPProblem) -> np.ndarray:
    cam = problem.cam
    m = problem.observations.means
    return np.column_stack([(m[:, 0] - cam.cx) / cam.fx, (m[:, 1] - cam.cy) / cam.fy])


def _rms_spread(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))))


_SELECT_ITERS = 10


def initial_pose(problem: PnPProblem) -> Pose6D:
    """Deterministic coarse pose from spreads and an orthogonal Procrustes fit.

    Depth comes from the ratio of model spread to image spread, the lateral
    offset from back-projecting the observation centroid, and the rotation
    from a Procrustes fit of the centred model onto the back-projected rays.
    Of the two depth-mirrored Procrustes solutions, the one reaching the lower
    reprojection error after a few least-squares iterations is returned
    (unrefined).
    """
    q = _normalized(problem)
    z = problem.model.points3d
    zc = z - z.mean(axis=0)
    s_img = _rms_spread(q)
    if not s_img > 1e-12:
        raise DegenerateModel("observations have no spatial spread")
    s_model = _rms_spread(z)
    # an isotropic cloud keeps sqrt(2/3) of its RMS spread under projection
    depth = math.sqrt(2.0 / 3.0) * s_model / s_img
    qbar = q.mean(axis=0)
    target = np.column_stack([(q - qbar) * depth, np.zeros(len(q))])
    H = zc.T @ target
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateModel("Procrustes system is rank deficient")
    R0 = Vt.T @ np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))]) @ U.T
    # mirror image under weak perspective: reflect depth and the model's thinnest axis
    normal = np.linalg.svd(zc, full_matrices=False)[2][2]
    R1 = np.diag([1.0, 1.0, -1.0]) @ R0 @ (np.eye(3) - 2.0 * np.outer(normal, normal))
    candidates = []
    for rank, R in enumerate((R0, R1)):
        lateral = zc @ R.T
        s_proj = _rms_spread(lateral[:, :2])
        d = s_proj / s_img if s_proj > 0 else depth
        # keep every point in front of the camera
        d = max(d, float(np.max(-lateral[:, 2])) + 1e-3 * max(d, 1.0))
        t = d * np.array([qbar[0], qbar[1], 1.0]) - R @ z.mean(axis=0)
        pose = Pose6D.from_vector(np.concatenate([matrix_to_euler(R), t]))
        # rank the two mirror candidates by a short least-squares refinement
        y, cost, _, _, status = kernels.solve_pnp(
            z, problem.observations.means, np.broadcast_to(np.eye(2), (len(z), 2, 2)),
            pose.as_vector(), problem.cam.as_array(), kernels.LOSS_SQUARED, 1.0,
            _SELECT_ITERS, 1e-10, 1e-3, 1e-10,
        )
        if status in (kernels.SINGULAR, kernels.BEHIND_AT_INIT) or not math.isfinite(cost):
            cost = math.inf
        candidates.append((cost, rank, pose))
    candidates.sort(key=lambda c: (c[0], c[1]))
    return candidates[0][2]
