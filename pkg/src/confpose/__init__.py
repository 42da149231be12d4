"""Conformal keypoint regions propagated to 6D pose confidence regions."""
from confpose.conformal import (
    CalibrationModel,
    KeypointConfidenceRegion,
    calibrate,
    contains,
    nonconformity,
    predict_region,
    quantile,
)
from confpose.core import (
    CameraIntrinsics,
    Ellipsoid3,
    GaussianKeypoint,
    GaussianKeypointSet,
    ObjectModel,
    Pose6D,
    euler_to_matrix,
    matrix_to_euler,
    project,
)
from confpose.ift import PoseConfidenceRegion, pose_jacobian, propagate, region_from_conformal
from confpose.kernels import BACKEND
from confpose.metrics import EvaluationReport, Thresholds, ellipsoid_volume, keypoint_coverage, pose_coverage
from confpose.pnp import LEAST_SQUARES, PnPProblem, PnPSolution, SolverConfig, solve
from confpose.sampler import SampledPoseRegion, sample_region

__version__ = "0.1.0"
