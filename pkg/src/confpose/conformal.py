"""Inductive conformal calibration of ball-shaped keypoint regions.

Each keypoint residual is scaled by ``det(cov) ** q``; an image's
nonconformity score is the largest scaled residual over its keypoints. At
test time every keypoint gets a closed ball of radius ``det(cov) ** q`` times
the calibration quantile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from confpose.core import GaussianKeypoint, GaussianKeypointSet
from confpose.errors import DegenerateCovariance, EpsilonTooSmall, LengthMismatch

DEFAULT_SCALE_EXPONENT = 0.25
# keeps regions non-degenerate when every calibration score is zero
MIN_RADIUS = 1e-9


def keypoint_scale(kp: GaussianKeypoint, scale_exponent: float = DEFAULT_SCALE_EXPONENT) -> float:
    det = float(np.linalg.det(kp.cov))
    if not det > 0:
        raise DegenerateCovariance(f"det(cov) = {det:.3g} is not positive")
    return det ** scale_exponent


def keypoint_scales(pred: GaussianKeypointSet, scale_exponent: float = DEFAULT_SCALE_EXPONENT) -> np.ndarray:
    """Vectorized :func:`keypoint_scale` over a keypoint set."""
    c = pred.covs
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    if np.any(det <= 0):
        raise DegenerateCovariance("a keypoint covariance has non-positive determinant")
    return det ** scale_exponent


def _as_points(gt, n: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=float)
    if gt.ndim != 2 or gt.shape != (n, 2):
        raise LengthMismatch(f"expected {n} ground-truth keypoints, got array of shape {gt.shape}")
    return gt


def nonconformity(gt, pred: GaussianKeypointSet, scale_exponent: float = DEFAULT_SCALE_EXPONENT) -> float:
    gt = _as_points(gt, len(pred))
    dist = np.linalg.norm(gt - pred.means, axis=1)
    return float(np.max(dist / keypoint_scales(pred, scale_exponent)))


@dataclass(frozen=True)
class CalibrationModel:
    """Calibration scores sorted in descending order."""

    scores: np.ndarray
    scale_exponent: float = DEFAULT_SCALE_EXPONENT

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float)
        if scores.ndim != 1 or scores.size < 1:
            raise ValueError("a calibration model needs at least one score")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError("calibration scores must be finite and non-negative")
        if np.any(np.diff(scores) > 0):
            raise ValueError("calibration scores must be sorted in descending order")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "scale_exponent", float(self.scale_exponent))

    def __len__(self) -> int:
        return self.scores.size

    def __eq__(self, other):
        if not isinstance(other, CalibrationModel):
            return NotImplemented
        return self.scale_exponent == other.scale_exponent and np.array_equal(self.scores, other.scores)

    __hash__ = None


def calibrate(
    dataset: Iterable[tuple[object, GaussianKeypointSet]],
    scale_exponent: float = DEFAULT_SCALE_EXPONENT,
) -> CalibrationModel:
    """Score every (ground truth, prediction) pair and sort the scores."""
    scores = []
    for i, (gt, pred) in enumerate(dataset):
        try:
            scores.append(nonconformity(gt, pred, scale_exponent))
        except (LengthMismatch, DegenerateCovariance) as exc:
            raise type(exc)(f"calibration sample {i}: {exc}") from exc
    if not scores:
        raise ValueError("calibration dataset is empty")
    # stable descending sort: ties keep their input order
    arr = np.asarray(scores)
    order = np.argsort(-arr, kind="stable")
    return CalibrationModel(arr[order], scale_exponent)


def quantile_rank(n_scores: int, epsilon: float) -> int:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    k = math.floor(n_scores * epsilon)
    if k < 1:
        raise EpsilonTooSmall(
            f"floor(l * epsilon) = floor({n_scores} * {epsilon}) = 0; "
            "enlarge the calibration set or epsilon"
        )
    return k


def quantile(model: CalibrationModel, epsilon: float) -> float:
    """The floor(l * epsilon)-th largest calibration score (1-indexed)."""
    return float(model.scores[quantile_rank(len(model), epsilon) - 1])


@dataclass(frozen=True)
class KeypointConfidenceRegion:
    centers: np.ndarray
    radii: np.ndarray
    capped: np.ndarray | None = None

    def __post_init__(self):
        centers = np.array(self.centers, dtype=float)
        radii = np.array(self.radii, dtype=float)
        if centers.ndim != 2 or centers.shape[1] != 2 or radii.shape != (centers.shape[0],):
            raise LengthMismatch("centers must be (N, 2) and radii (N,)")
        if not np.all(np.isfinite(radii)) or np.any(radii <= 0):
            raise ValueError("radii must be finite and positive")
        capped = np.zeros(radii.shape, bool) if self.capped is None else np.array(self.capped, bool)
        for arr in (centers, radii, capped):
            arr.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "capped", capped)

    def __len__(self) -> int:
        return self.radii.size


def predict_region(
    pred: GaussianKeypointSet,
    model: CalibrationModel,
    epsilon: float,
    image_diagonal: float,
) -> KeypointConfidenceRegion:
    if not image_diagonal > 0:
        raise ValueError("image_diagonal must be positive")
    alpha = quantile(model, epsilon)
    raw = keypoint_scales(pred, model.scale_exponent) * alpha
    radii = np.clip(raw, MIN_RADIUS, image_diagonal)
    return KeypointConfidenceRegion(pred.means, radii, capped=raw > image_diagonal)


def contains(region: KeypointConfidenceRegion, gt) -> bool:
    """True iff every ground-truth keypoint lies in its closed ball."""
    gt = _as_points(gt, len(region))
    return bool(np.all(np.linalg.norm(gt - region.centers, axis=1) <= region.radii))


def calibrate_arrays(gts: Sequence, preds: Sequence[GaussianKeypointSet], scale_exponent=DEFAULT_SCALE_EXPONENT):
    """Convenience wrapper taking parallel sequences instead of pairs."""
    if len(gts) != len(preds):
        raise LengthMismatch("ground truths and predictions differ in length")
    return calibrate(zip(gts, preds), scale_exponent)
