import json
import subprocess
import sys

import numpy as np
import pytest

from confpose import io, synth
from confpose.cli import main
from confpose.core import GaussianKeypointSet


@pytest.fixture
def run(capsys):
    def _run(*argv):
        code = main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err

    return _run


def test_generate_is_byte_identical(tmp_path, run):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("generate", "--seed", 7, "--count", 100, "--out", a)[0] == 0
    code, out, _ = run("generate", "--seed", 7, "--count", 100, "--out", b)
    assert code == 0 and "100" in out and "7" in out
    assert a.read_bytes() == b.read_bytes()


def test_generate_count_zero_is_usage_error(tmp_path, run):
    with pytest.raises(SystemExit) as info:
        run("generate", "--count", 0, "--out", tmp_path / "x.jsonl")
    assert info.value.code == 2


def test_default_keypoint_count(tmp_path, run):
    path = tmp_path / "d.jsonl"
    run("generate", "--count", 3, "--out", path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["euler_convention"] == "ZYX-intrinsic" and header["format_version"] == io.FORMAT_VERSION
    for line in lines[1:]:
        rec = json.loads(line)
        assert len(rec["gt_keypoints"]) == len(rec["pred_means"]) == len(rec["pred_covs"]) == 11


def test_dataset_round_trip_is_exact(tmp_path):
    samples = synth.generate(synth.SceneConfig(rng_seed=3), 5)
    path = tmp_path / "d.jsonl"
    io.write_dataset(path, samples)
    header, records = io.read_dataset(path)
    assert header.hash == io.content_hash(samples[0].model_ref, samples[0].cam)
    for s, r in zip(samples, records):
        assert np.array_equal(r.predicted.means, s.predicted.means)
        assert np.array_equal(r.predicted.covs, s.predicted.covs)
        assert np.array_equal(r.gt_pose.as_vector(), s.gt_pose.as_vector())


def toy_dataset(path, residuals):
    base = synth.generate(synth.SceneConfig(rng_seed=1, noise_std_range=(0.0, 0.0)), len(residuals))
    toy = []
    for s, r in zip(base, residuals):
        means = s.gt_keypoints2d.copy()
        means[0] += [0.6 * r, 0.8 * r]
        pred = GaussianKeypointSet(means, np.broadcast_to(np.eye(2), (len(means), 2, 2)))
        toy.append(synth.SyntheticSample(s.gt_pose, s.gt_keypoints2d, pred, s.cam, s.model_ref))
    io.write_dataset(path, toy)


def test_calibrate_toy_quantile(tmp_path, run):
    data, model = tmp_path / "toy.jsonl", tmp_path / "m.json"
    toy_dataset(data, [1.0, 5.0, 2.0, 4.0, 3.0])
    # unit covariances: each score is the residual norm; rank floor(5 * 0.4) = 2 -> second largest
    code, out, _ = run("calibrate", "--dataset", data, "--epsilon", 0.4, "--out", model)
    assert code == 0
    assert float(out.split()[1]) == pytest.approx(4.0, rel=1e-12)
    assert "(rank 2 of 5" in out
    first = model.read_bytes()
    doc = json.loads(first)
    assert doc["scores"] == pytest.approx([5.0, 4.0, 3.0, 2.0, 1.0], rel=1e-12)
    run("calibrate", "--dataset", data, "--epsilon", 0.4, "--out", model)
    assert model.read_bytes() == first


def test_calibrate_epsilon_too_small(tmp_path, run):
    data = tmp_path / "d.jsonl"
    run("generate", "--count", 100, "--out", data)
    code, _, err = run("calibrate", "--dataset", data, "--epsilon", 0.0001, "--out", tmp_path / "m.json")
    assert code == 3 and "error" in err


def test_corrupt_line_is_named(tmp_path, run):
    data = tmp_path / "d.jsonl"
    run("generate", "--count", 20, "--out", data)
    lines = data.read_text().splitlines()
    lines[16] = lines[16][: len(lines[16]) // 2]
    data.write_text("\n".join(lines) + "\n")
    code, _, err = run("calibrate", "--dataset", data, "--epsilon", 0.1, "--out", tmp_path / "m.json")
    assert code == 4 and "line 17" in err


def test_wrong_keypoint_count_is_malformed(tmp_path, run):
    data = tmp_path / "d.jsonl"
    run("generate", "--count", 5, "--out", data)
    lines = data.read_text().splitlines()
    rec = json.loads(lines[3])
    rec["pred_means"] = rec["pred_means"][:-1]
    lines[3] = json.dumps(rec)
    data.write_text("\n".join(lines) + "\n")
    code, _, err = run("calibrate", "--dataset", data, "--epsilon", 0.2, "--out", tmp_path / "m.json")
    assert code == 4 and "line 4" in err


def test_hash_mismatch(tmp_path, run):
    a, b, m = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "m.json"
    run("generate", "--seed", 1, "--count", 20, "--out", a)
    run("generate", "--seed", 2, "--count", 5, "--out", b)
    run("calibrate", "--dataset", a, "--epsilon", 0.1, "--out", m)
    code, _, err = run("evaluate", "--dataset", b, "--model", m, "--out", tmp_path / "r.json")
    assert code == 5 and "hash" in err


def test_missing_file_is_io_error(tmp_path, run):
    code, _, _ = run("calibrate", "--dataset", tmp_path / "nope.jsonl", "--epsilon", 0.1, "--out", tmp_path / "m.json")
    assert code == 1


def test_noise_free_evaluate(tmp_path, run):
    data, m, rep = tmp_path / "d.jsonl", tmp_path / "m.json", tmp_path / "r.json"
    run("generate", "--count", 20, "--noise-std-range", 0, 0, "--out", data)
    run("calibrate", "--dataset", data, "--epsilon", 0.1, "--out", m)
    assert run("evaluate", "--dataset", data, "--model", m, "--out", rep)[0] == 0
    doc = json.loads(rep.read_text())
    det = doc["summary"]["deterministic"]
    assert det["eta_kpt"] == 1.0 and det["failures"] == 0
    for v_r, v_t in det["volume_samples"]:
        assert v_r < 1e-12 and v_t < 1e-12
    for key in ("epsilon", "q", "kappa", "scale_mode", "thresholds", "seed", "mode", "ellipsoid_scale"):
        assert key in doc["config"]
    assert all(v >= 0 for v in doc["timing_ms"]["per_stage_sum"].values())
    assert (tmp_path / "r.deterministic.V_R.cdf.txt").exists() and (tmp_path / "r.boxplot.tsv").exists()


def test_both_mode_pairs_and_determinism(tmp_path, run):
    data, m = tmp_path / "d.jsonl", tmp_path / "m.json"
    run("generate", "--seed", 3, "--count", 6, "--out", data)
    run("calibrate", "--dataset", data, "--epsilon", 0.2, "--out", m)
    outs = []
    for i, jobs in enumerate((1, 1, 2)):
        rep = tmp_path / f"r{i}.json"
        args = ("evaluate", "--dataset", data, "--model", m, "--mode", "both", "--trials", 100, "--no-timing", "--jobs", jobs, "--out", rep)
        assert run(*args)[0] == 0
        outs.append(rep.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    doc = json.loads(outs[0])
    assert "timing_ms" not in doc
    assert "paired" in doc["summary"]
    for img in doc["images"]:
        assert "V_R" in img["deterministic"] or "error" in img["deterministic"]
        assert "V_R" in img["sampling"] or "error" in img["sampling"]
        assert "timing_ms" not in img


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "confpose", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate" in out.stdout
