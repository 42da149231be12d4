"""Per-image evaluation shared by the command line and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from confpose import ift, metrics, synth
from confpose.conformal import CalibrationModel, contains, predict_region
from confpose.core import CameraIntrinsics, GaussianKeypointSet, ObjectModel, Pose6D
from confpose.errors import ConfposeError
from confpose.pnp import PnPProblem, solve
from confpose.sampler import DEFAULT_TRIALS, sample_region

MODES = ("deterministic", "sampling", "both")


@dataclass(frozen=True)
class EvalConfig:
    epsilon: float
    mode: str = "deterministic"
    chi2_calibrated: bool = True
    thresholds: metrics.Thresholds = metrics.Thresholds()
    trials: int = DEFAULT_TRIALS
    kp_cov_source: str = "conformal"
    seed: int = 0
    image_diagonal: float = synth.image_diagonal()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate_image(
    index: int,
    model: ObjectModel,
    cam: CameraIntrinsics,
    predicted: GaussianKeypointSet,
    gt_pose: Pose6D,
    gt_keypoints: np.ndarray,
    calib: CalibrationModel,
    cfg: EvalConfig,
) -> dict:
    """Run one image through region prediction, PnP, and the requested pose regions.

    Solver failures are recorded under ``"error"`` rather than raised.
    """
    timing = {}
    out: dict = {"index": int(index)}
    t0 = time.perf_counter()
    region2d = predict_region(predicted, calib, cfg.epsilon, cfg.image_diagonal)
    timing["keypoint_region"] = (time.perf_counter() - t0) * 1e3
    out["kpt_covered"] = contains(region2d, gt_keypoints)
    out["radii"] = region2d.radii.tolist()
    problem = PnPProblem(model, predicted, cam)
    if cfg.mode in ("deterministic", "both"):
        t0 = time.perf_counter()
        try:
            sol = solve(problem)
            reg = ift.region_from_conformal(
                problem, sol, region2d, cfg.epsilon, cfg.chi2_calibrated, kp_cov_source=cfg.kp_cov_source
            )
            v_r, v_t = metrics.region_volumes(reg)
            out["deterministic"] = {
                "center": reg.rotation.center.tolist() + reg.translation.center.tolist(),
                "V_R": v_r,
                "V_t": v_t,
                "rot_inside": metrics.rotation_inside(reg, gt_pose),
                "trans_inside": metrics.translation_inside(reg, gt_pose),
            }
        except ConfposeError as exc:
            out["deterministic"] = {"error": f"{type(exc).__name__}: {exc}"}
        timing["deterministic"] = (time.perf_counter() - t0) * 1e3
    if cfg.mode in ("sampling", "both"):
        t0 = time.perf_counter()
        try:
            sr = sample_region(problem, region2d, cfg.trials, image_seed(cfg.seed, index))
            out["sampling"] = {
                "accepted": sr.accepted,
                "attempted": sr.attempted,
                "V_R": sr.hull_R_volume,
                "V_t": sr.hull_t_volume,
                "rot_inside": sr.rotation_inside(gt_pose),
                "trans_inside": sr.translation_inside(gt_pose),
            }
        except ConfposeError as exc:
            out["sampling"] = {"error": f"{type(exc).__name__}: {exc}"}
        timing["sampling"] = (time.perf_counter() - t0) * 1e3
    out["timing_ms"] = timing
    return out


def image_results(per_image: list[dict], key: str) -> list[metrics.ImageResult]:
    rows = []
    for img in per_image:
        d = img.get(key)
        if d is None:
            continue
        rows.append(
            metrics.ImageResult(
                d.get("V_R"),
                d.get("V_t"),
                bool(d.get("rot_inside", False)),
                bool(d.get("trans_inside", False)),
                img["kpt_covered"],
                np.asarray(img["radii"]),
            )
        )
    return rows
