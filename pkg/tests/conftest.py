import numpy as np
import pytest

from confpose import kernels
from confpose.core import CameraIntrinsics, GaussianKeypointSet, ObjectModel, Pose6D, project_points
from confpose.pnp import PnPProblem

CAM = CameraIntrinsics(800.0, 800.0, 512.0, 512.0)


def random_scene(seed, n=8, noise=0.0, depth=(2.0, 5.0), max_rot_deg=60.0):
    """Noise-optional scene: (problem, gt pose). Covariances are noise^2 I (or I when noise-free)."""
    rng = np.random.default_rng(seed)
    while True:
        pts = rng.uniform(-0.25, 0.25, size=(n, 3))
        pts -= pts.mean(axis=0)
        if np.linalg.svd(pts, compute_uv=False)[2] > 0.05:
            break
    lim = np.radians(max_rot_deg)
    pose = Pose6D(rng.uniform(-lim, lim, 3), [rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(*depth)])
    uv = project_points(pts, pose, CAM)
    means = uv + noise * rng.standard_normal(uv.shape)
    var = np.full(n, noise**2 if noise > 0 else 1.0)
    return PnPProblem(ObjectModel(pts), GaussianKeypointSet.isotropic(means, var), CAM), pose


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


# acceptance criteria record their verdicts here; printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
