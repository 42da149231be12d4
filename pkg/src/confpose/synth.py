"""Synthetic scenes standing in for a trained keypoint regressor.

Every sample draws its own pose and keypoint noise from a generator seeded by
``(seed, index)``, so samples are independent of one another and any index
range can be regenerated exactly. The object model and camera are shared by
every sample generated from the same seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from confpose.core import (
    CameraIntrinsics,
    GaussianKeypointSet,
    ObjectModel,
    Pose6D,
    project_points,
)
from confpose.errors import GenerationExhausted

IMAGE_SIZE = (1024, 1024)
DEFAULT_CAMERA = CameraIntrinsics(800.0, 800.0, 512.0, 512.0)
MAX_POSE_ATTEMPTS = 10_000
# predicted std floor so noise-free scenes still carry SPD covariances
MIN_PREDICTED_STD = 1e-6


@dataclass(frozen=True)
class SceneConfig:
    n_keypoints: int = 11
    model_extent: float = 0.5
    depth_range: tuple[float, float] = (2.0, 6.0)
    max_rotation: float = 60.0
    noise_std_range: tuple[float, float] = (0.3, 2.0)
    # true noise variance divided by predicted variance (>1 means over-confident)
    cov_misspecification: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_keypoints < 4:
            raise ValueError("n_keypoints must be >= 4")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must be ordered and positive")
        lo, hi = self.noise_std_range
        if not 0 <= lo <= hi:
            raise ValueError("noise_std_range must be ordered and non-negative")
        if not self.model_extent > 0 or not self.cov_misspecification > 0:
            raise ValueError("model_extent and cov_misspecification must be positive")
        if not 0 <= self.max_rotation < 90:
            raise ValueError("max_rotation must lie in [0, 90) degrees")


@dataclass(frozen=True)
class SyntheticSample:
    gt_pose: Pose6D
    gt_keypoints2d: np.ndarray
    predicted: GaussianKeypointSet
    cam: CameraIntrinsics
    model_ref: ObjectModel
    noise_std: np.ndarray | None = None


def make_model(cfg: SceneConfig) -> ObjectModel:
    rng = np.random.default_rng([cfg.rng_seed, 0])
    while True:
        pts = rng.uniform(-0.5, 0.5, size=(cfg.n_keypoints, 3)) * cfg.model_extent
        pts -= pts.mean(axis=0)
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[2] > 0.05 * sv[0]:
            return ObjectModel(pts)


def random_pose(rng: np.random.Generator, cfg: SceneConfig, cam: CameraIntrinsics) -> Pose6D:
    lim = math.radians(cfg.max_rotation)
    euler = rng.uniform(-lim, lim, size=3)
    depth = rng.uniform(*cfg.depth_range)
    # lateral offset keeps the object centre inside the middle 60% of the frame
    u = rng.uniform(-0.3, 0.3, size=2) * np.array([IMAGE_SIZE[0] / cam.fx, IMAGE_SIZE[1] / cam.fy])
    return Pose6D(euler, [u[0] * depth, u[1] * depth, depth])


def _in_frame(uv: np.ndarray) -> bool:
    return bool(np.all((uv >= 0) & (uv[:, 0] < IMAGE_SIZE[0])[:, None] & (uv[:, 1] < IMAGE_SIZE[1])[:, None]))


def generate_one(cfg: SceneConfig, index: int, model: ObjectModel, cam: CameraIntrinsics = DEFAULT_CAMERA):
    rng = np.random.default_rng([cfg.rng_seed, 1, index])
    for _ in range(MAX_POSE_ATTEMPTS):
        pose = random_pose(rng, cfg, cam)
        P = pose.transform(model.points3d)
        if np.all(P[:, 2] > 0.1):
            uv = project_points(model.points3d, pose, cam)
            if _in_frame(uv):
                break
    else:
        raise GenerationExhausted(f"no visible pose after {MAX_POSE_ATTEMPTS} attempts (sample {index})")
    n = len(model)
    std = rng.uniform(*cfg.noise_std_range, size=n)
    means = uv + std[:, None] * rng.standard_normal((n, 2))
    pred_var = np.maximum(std, MIN_PREDICTED_STD) ** 2 / cfg.cov_misspecification
    return SyntheticSample(pose, uv, GaussianKeypointSet.isotropic(means, pred_var), cam, model, std)


def generate(cfg: SceneConfig, count: int, start_index: int = 0, cam: CameraIntrinsics = DEFAULT_CAMERA):
    """Generate ``count`` samples with indices ``start_index .. start_index + count - 1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    model = make_model(cfg)
    return [generate_one(cfg, start_index + i, model, cam) for i in range(count)]


def image_diagonal() -> float:
    return math.hypot(*IMAGE_SIZE)
