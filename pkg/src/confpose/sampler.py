"""Sampling baseline: Monte Carlo pose regions from the 2D keypoint balls.

Each trial draws one point uniformly from every keypoint ball, solves the
full-set least-squares PnP from the central pose, and keeps the pose only if
every reprojected model point lands back inside its ball. The rotation and
translation regions are the convex hulls of the kept Euler triples (degrees)
and translations (metres).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from confpose import kernels
from confpose.conformal import KeypointConfidenceRegion
from confpose.core import Pose6D, wrap_difference
from confpose.errors import DegenerateHull, InsufficientSamples, LengthMismatch
from confpose.hull import ConvexHull3
from confpose.pnp import LEAST_SQUARES, PnPProblem, SolverConfig, solve

DEFAULT_TRIALS = 1000
MIN_HULL_SAMPLES = 4


@dataclass(frozen=True)
class SampledPoseRegion:
    """``hull_*_volume`` is None when fewer than four poses were accepted.

    A flat (coplanar) sample cloud has volume 0.0. Rotation volumes are in
    deg^3, translation volumes in m^3.
    """

    pose_samples: list
    hull_R_volume: float | None
    hull_t_volume: float | None
    accepted: int
    attempted: int
    center: Pose6D | None = None
    hull_R: ConvexHull3 | None = field(default=None, repr=False, compare=False)
    hull_t: ConvexHull3 | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.accepted <= self.attempted:
            raise ValueError("accepted must lie in [0, attempted]")
        for v in (self.hull_R_volume, self.hull_t_volume):
            if v is not None and v < 0:
                raise ValueError("hull volumes must be non-negative")

    def require_volumes(self) -> tuple[float, float]:
        if self.hull_R_volume is None or self.hull_t_volume is None:
            raise InsufficientSamples(f"only {self.accepted} of {self.attempted} samples accepted")
        return self.hull_R_volume, self.hull_t_volume

    def rotation_inside(self, gt: Pose6D) -> bool:
        if self.hull_R is None or self.center is None:
            return False
        return self.hull_R.contains(_euler_deg(gt.euler[None, :], self.center.euler)[0])

    def translation_inside(self, gt: Pose6D) -> bool:
        if self.hull_t is None:
            return False
        return self.hull_t.contains(gt.translation)


def _euler_deg(euler: np.ndarray, center: np.ndarray) -> np.ndarray:
    # unwrap around the centre so a cloud straddling +-180 deg stays contiguous
    return np.degrees(center + wrap_difference(euler - center))


def sample_disks(region: KeypointConfidenceRegion, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw from every closed ball of ``region``."""
    n = len(region)
    r = region.radii * np.sqrt(rng.random(n))
    phi = rng.random(n) * 2.0 * math.pi
    return region.centers + np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def _hull_volume(points: np.ndarray) -> tuple[float, ConvexHull3 | None]:
    try:
        hull = ConvexHull3(points)
    except DegenerateHull:
        return 0.0, None
    return hull.volume(), hull


def sample_region(
    problem: PnPProblem,
    region2d: KeypointConfidenceRegion,
    trials: int = DEFAULT_TRIALS,
    rng_seed: int = 0,
    center: Pose6D | None = None,
    cfg: SolverConfig = LEAST_SQUARES,
) -> SampledPoseRegion:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(region2d) != len(problem):
        raise LengthMismatch("region and problem differ in keypoint count")
    if not np.all(np.isfinite(region2d.radii)):
        raise ValueError("region radii must be finite")
    if center is None:
        center = solve(problem, None, cfg).pose
    draws = np.stack([sample_disks(region2d, np.random.default_rng([rng_seed, t])) for t in range(trials)])
    weights = (
        problem.observations.inverse_covs() if cfg.use_weights else np.broadcast_to(np.eye(2), (len(problem), 2, 2))
    )
    poses, _, status = kernels.solve_pnp_batch(
        problem.model.points3d,
        draws,
        np.ascontiguousarray(weights),
        center.as_vector(),
        problem.cam.as_array(),
        kernels.LOSS_HUBER if cfg.loss == "huber" else kernels.LOSS_SQUARED,
        cfg.huber_delta,
        cfg.max_iters,
        cfg.grad_tol,
        cfg.initial_damping,
        cfg.step_tol,
    )
    kept = []
    cam = problem.cam.as_array()
    for y, st in zip(poses, status):
        if st in (kernels.SINGULAR, kernels.BEHIND_AT_INIT):
            continue
        uv, _, depth = kernels.project_jacobian(problem.model.points3d, y, cam)
        if np.any(depth <= kernels.DEPTH_EPS):
            continue
        if np.all(np.linalg.norm(uv - region2d.centers, axis=1) <= region2d.radii):
            kept.append(Pose6D.from_vector(y))
    if len(kept) < MIN_HULL_SAMPLES:
        return SampledPoseRegion(kept, None, None, len(kept), trials, center)
    euler = np.array([p.euler for p in kept])
    trans = np.array([p.translation for p in kept])
    v_R, hull_R = _hull_volume(_euler_deg(euler, center.euler))
    v_t, hull_t = _hull_volume(trans)
    return SampledPoseRegion(kept, v_R, v_t, len(kept), trials, center, hull_R, hull_t)
