import numpy as np
import pytest
from scipy.stats import chi2

from confpose import synth
from confpose.conformal import calibrate, contains, nonconformity, predict_region, quantile
from confpose.core import project_points
from confpose.errors import GenerationExhausted


def test_noise_free_means_equal_ground_truth():
    for s in synth.generate(synth.SceneConfig(noise_std_range=(0.0, 0.0)), 5):
        assert np.array_equal(s.predicted.means, s.gt_keypoints2d)
        assert np.all(s.predicted.covs > -1)


def test_deterministic():
    cfg = synth.SceneConfig(rng_seed=11)
    a, b = synth.generate(cfg, 10), synth.generate(cfg, 10)
    for x, y in zip(a, b):
        assert np.array_equal(x.predicted.means, y.predicted.means)
        assert np.array_equal(x.gt_pose.as_vector(), y.gt_pose.as_vector())
    # any index range regenerates identically
    tail = synth.generate(cfg, 4, start_index=6)
    for x, y in zip(a[6:], tail):
        assert np.array_equal(x.predicted.means, y.predicted.means)


def test_ground_truth_exact_and_in_frame():
    for s in synth.generate(synth.SceneConfig(rng_seed=2), 50):
        uv = project_points(s.model_ref.points3d, s.gt_pose, s.cam)
        assert np.abs(uv - s.gt_keypoints2d).max() <= 1e-12
        assert np.all(uv >= 0) and np.all(uv < 1024)
        assert len(s.model_ref) == 11


def test_predicted_covariance_convention():
    cfg = synth.SceneConfig(cov_misspecification=4.0, rng_seed=3)
    for s in synth.generate(cfg, 5):
        expected = s.noise_std**2 / 4.0
        assert np.allclose(s.predicted.covs[:, 0, 0], expected, rtol=1e-15)
        assert np.all(s.predicted.covs[:, 0, 1] == 0.0)


def test_noise_std_matches_configuration():
    samples = synth.generate(synth.SceneConfig(rng_seed=4), 10_000)
    z = np.concatenate([(s.predicted.means - s.gt_keypoints2d) / s.noise_std[:, None] for s in samples])
    assert np.std(z) == pytest.approx(1.0, rel=0.03)
    std = np.concatenate([s.noise_std for s in samples])
    assert 0.3 <= std.min() and std.max() <= 2.0


def test_splits_are_exchangeable():
    # one-sided tests are not wanted here: a two-sided permutation test on the mean score
    pvals = []
    for seed in range(20):
        cfg = synth.SceneConfig(rng_seed=seed)
        s = synth.generate(cfg, 400)
        scores = np.array([nonconformity(x.gt_keypoints2d, x.predicted) for x in s])
        a, b = scores[:200], scores[200:]
        obs = abs(a.mean() - b.mean())
        rng = np.random.default_rng(seed)
        perm = np.array([np.abs(np.diff([p[:200].mean(), p[200:].mean()]))[0] for p in (rng.permutation(scores) for _ in range(2000))])
        pvals.append((1 + np.sum(perm >= obs)) / 2001)
    fisher = -2 * np.sum(np.log(pvals))
    combined = chi2.sf(fisher, 2 * len(pvals))
    print(f"per-seed p-values min {min(pvals):.3f}; rejections at 1%: {sum(p < 0.01 for p in pvals)}; combined p {combined:.3f}")
    assert combined >= 0.01


def test_generation_exhausted():
    cfg = synth.SceneConfig(depth_range=(0.05, 0.05), model_extent=5.0)
    with pytest.raises(GenerationExhausted):
        synth.generate(cfg, 1)


def test_config_validation():
    for bad in (dict(n_keypoints=3), dict(depth_range=(3.0, 2.0)), dict(noise_std_range=(2.0, 1.0)),
                dict(cov_misspecification=0.0), dict(max_rotation=90.0)):
        with pytest.raises(ValueError):
            synth.SceneConfig(**bad)
    with pytest.raises(ValueError):
        synth.generate(synth.SceneConfig(), 0)


def test_calibration_survives_misspecification():
    eps = 0.1
    cfg = synth.SceneConfig(cov_misspecification=4.0, rng_seed=5)
    cal = synth.generate(cfg, 1000)
    test = synth.generate(cfg, 1000, start_index=1000)
    model = calibrate((s.gt_keypoints2d, s.predicted) for s in cal)
    calibrated = np.mean([contains(predict_region(s.predicted, model, eps, synth.image_diagonal()), s.gt_keypoints2d) for s in test])
    k2 = chi2.ppf(1 - eps, 2)
    raw = np.mean([
        all(d @ np.linalg.solve(c, d) <= k2 for d, c in zip(s.gt_keypoints2d - s.predicted.means, s.predicted.covs))
        for s in test
    ])
    assert quantile(model, eps) > 0
    assert calibrated >= 1 - eps - 0.02
    assert raw < 1 - eps - 0.10
