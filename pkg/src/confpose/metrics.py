"""Coverage rates, ellipsoid volumes and distribution summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from confpose.conformal import KeypointConfidenceRegion, contains
from confpose.core import Ellipsoid3, Pose6D
from confpose.errors import DegenerateShape, LengthMismatch

RAD3_TO_DEG3 = (180.0 / math.pi) ** 3


@dataclass(frozen=True)
class Thresholds:
    tau_R: float = 90.0**3  # deg^3
    tau_t: float = 1.0  # m^3

    def __post_init__(self):
        if not (self.tau_R > 0 and self.tau_t > 0):
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class ImageResult:
    """Per-image outcome fed to :func:`summarize`.

    A volume of None marks an image whose region could not be built (solver
    failure, undefined hull); such an image counts as uncovered but neither
    enters the mean volume nor the 'Out' tally.
    """

    V_R: float | None
    V_t: float | None
    rot_inside: bool
    trans_inside: bool
    kpt_covered: bool | None = None
    radii: np.ndarray | None = None


@dataclass(frozen=True)
class EvaluationReport:
    eta_kpt: float | None
    eta_R: float
    eta_t: float
    mean_V_R: float | None
    mean_V_t: float | None
    out_R: int
    out_t: int
    radii_stats: np.ndarray | None
    volume_samples: list = field(default_factory=list)

    def __post_init__(self):
        for eta in (self.eta_kpt, self.eta_R, self.eta_t):
            if eta is not None and not 0.0 <= eta <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if max(self.out_R, self.out_t) > len(self.volume_samples):
            raise ValueError("out counts exceed the number of images")


def keypoint_coverage(regions: Sequence[KeypointConfidenceRegion], gts: Sequence) -> float:
    if len(regions) != len(gts):
        raise LengthMismatch(f"{len(regions)} regions but {len(gts)} ground truths")
    if len(regions) == 0:
        raise LengthMismatch("need at least one image")
    return sum(contains(r, g) for r, g in zip(regions, gts)) / len(regions)


def ellipsoid_volume(e: Ellipsoid3, degrees: bool = False) -> float:
    """(4/3) pi scale^(3/2) sqrt(det shape); ``degrees`` converts a rad^3 volume to deg^3."""
    det = float(np.linalg.det(e.shape))
    if not det > 0:
        raise DegenerateShape(f"ellipsoid shape has determinant {det:g}")
    v = 4.0 / 3.0 * math.pi * e.scale**1.5 * math.sqrt(det)
    return v * RAD3_TO_DEG3 if degrees else v


def region_volumes(region) -> tuple[float, float]:
    """(V_R in deg^3, V_t in m^3) of a pose confidence region."""
    return ellipsoid_volume(region.rotation, degrees=True), ellipsoid_volume(region.translation)


def rotation_inside(region, gt: Pose6D) -> bool:
    # per-axis shortest signed difference, Euler angles being periodic
    return region.rotation.contains(gt.euler, wrap=True)


def translation_inside(region, gt: Pose6D) -> bool:
    return region.translation.contains(gt.translation)


def pose_coverage(regions: Sequence, gt_poses: Sequence[Pose6D], th: Thresholds = Thresholds()):
    """Returns ``(eta_R, eta_t, out_R, out_t)``; over-threshold regions count as misses."""
    if len(regions) != len(gt_poses):
        raise LengthMismatch(f"{len(regions)} regions but {len(gt_poses)} poses")
    if len(regions) == 0:
        raise LengthMismatch("need at least one image")
    results = []
    for reg, gt in zip(regions, gt_poses):
        vr, vt = region_volumes(reg)
        results.append(ImageResult(vr, vt, rotation_inside(reg, gt), translation_inside(reg, gt)))
    rep = summarize(results, th)
    return rep.eta_R, rep.eta_t, rep.out_R, rep.out_t


def _covered(inside: bool, v: float | None, tau: float) -> bool:
    return bool(inside) and v is not None and v <= tau


def _filtered_mean(values, tau: float) -> float | None:
    kept = [v for v in values if v is not None and v <= tau]
    return float(np.mean(kept)) if kept else None


def summarize(per_image: Sequence[ImageResult], th: Thresholds = Thresholds()) -> EvaluationReport:
    if len(per_image) == 0:
        raise ValueError("need at least one image")
    k = len(per_image)
    eta_R = sum(_covered(r.rot_inside, r.V_R, th.tau_R) for r in per_image) / k
    eta_t = sum(_covered(r.trans_inside, r.V_t, th.tau_t) for r in per_image) / k
    out_R = sum(r.V_R is not None and r.V_R > th.tau_R for r in per_image)
    out_t = sum(r.V_t is not None and r.V_t > th.tau_t for r in per_image)
    flags = [r.kpt_covered for r in per_image if r.kpt_covered is not None]
    eta_kpt = sum(flags) / len(flags) if flags else None
    radii = [np.asarray(r.radii, dtype=float) for r in per_image if r.radii is not None]
    radii_stats = np.mean(radii, axis=0) if radii and len({a.shape for a in radii}) == 1 else None
    return EvaluationReport(
        eta_kpt,
        eta_R,
        eta_t,
        _filtered_mean([r.V_R for r in per_image], th.tau_R),
        _filtered_mean([r.V_t for r in per_image], th.tau_t),
        int(out_R),
        int(out_t),
        radii_stats,
        [(r.V_R, r.V_t) for r in per_image],
    )


def boxplot_stats(values) -> dict:
    """Quartiles and 1.5 IQR whiskers (whiskers snap to the most extreme data inside the fences)."""
    x = np.sort(np.asarray([v for v in values if v is not None], dtype=float))
    if x.size == 0:
        return {"n": 0, "q1": None, "median": None, "q3": None, "whisker_lo": None, "whisker_hi": None, "outliers": []}
    q1, med, q3 = (float(v) for v in np.percentile(x, [25, 50, 75]))
    iqr = q3 - q1
    inside = x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]
    outliers = x[(x < q1 - 1.5 * iqr) | (x > q3 + 1.5 * iqr)]
    return {
        "n": int(x.size),
        "q1": q1,
        "median": med,
        "q3": q3,
        "whisker_lo": float(inside.min()),
        "whisker_hi": float(inside.max()),
        "outliers": [float(v) for v in outliers],
    }


def cdf_columns(values, header: str) -> str:
    """Sorted samples, one per line, after a ``#`` header; undefined values are dropped."""
    x = sorted(float(v) for v in values if v is not None)
    lines = [f"# {line}" for line in header.splitlines()]
    lines.extend(repr(v) for v in x)
    return "\n".join(lines) + "\n"
