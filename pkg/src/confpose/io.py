"""Dataset (JSON lines), calibration and report files.

Floats are written with Python's shortest round-tripping repr, so every value
reads back bit-identical.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from confpose.conformal import CalibrationModel
from confpose.core import (
    EULER_CONVENTION,
    CameraIntrinsics,
    GaussianKeypointSet,
    ObjectModel,
    Pose6D,
)
from confpose.errors import ConfposeError, MalformedInput
from confpose.synth import IMAGE_SIZE, SyntheticSample

FORMAT_VERSION = 1
UNITS = {"angles": "rad", "translation": "m", "keypoints": "px"}


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(model: ObjectModel, cam: CameraIntrinsics) -> str:
    """SHA-256 over the canonical JSON of model points and intrinsics."""
    payload = dumps({"camera": cam.as_array().tolist(), "model": model.points3d.tolist()})
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class DatasetHeader:
    model: ObjectModel
    cam: CameraIntrinsics
    image_size: tuple[int, int]
    hash: str
    generator: dict | None = None


@dataclass(frozen=True)
class DatasetRecord:
    index: int
    gt_pose: Pose6D
    gt_keypoints: np.ndarray
    predicted: GaussianKeypointSet


def header_record(model: ObjectModel, cam: CameraIntrinsics, generator: dict | None = None) -> dict:
    return {
        "type": "header",
        "format_version": FORMAT_VERSION,
        "euler_convention": EULER_CONVENTION,
        "units": UNITS,
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy},
        "image_size": list(IMAGE_SIZE),
        "model": model.points3d.tolist(),
        "hash": content_hash(model, cam),
        "generator": generator,
    }


def sample_record(index: int, s: SyntheticSample) -> dict:
    covs = s.predicted.covs
    return {
        "type": "sample",
        "index": int(index),
        "gt_pose": {"euler": s.gt_pose.euler.tolist(), "translation": s.gt_pose.translation.tolist()},
        "gt_keypoints": np.asarray(s.gt_keypoints2d).tolist(),
        "pred_means": s.predicted.means.tolist(),
        "pred_covs": np.stack([covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]], axis=1).tolist(),
    }


def write_dataset(path, samples: list[SyntheticSample], start_index: int = 0, generator: dict | None = None) -> None:
    first = samples[0]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(header_record(first.model_ref, first.cam, generator)) + "\n")
        for i, s in enumerate(samples):
            fh.write(dumps(sample_record(start_index + i, s)) + "\n")


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise MalformedInput(f"missing field {key!r}", line)
    return obj[key]


def _array(value, shape_tail: tuple, line: int, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedInput(f"{name} is not numeric", line) from exc
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail or not np.all(np.isfinite(arr)):
        raise MalformedInput(f"{name} has shape {arr.shape}, expected (*, {', '.join(map(str, shape_tail))})", line)
    return arr


def _parse_header(obj: dict, line: int) -> DatasetHeader:
    if obj.get("type") != "header":
        raise MalformedInput("first record must be the header", line)
    if _require(obj, "format_version", line) != FORMAT_VERSION:
        raise MalformedInput(f"unsupported format_version {obj['format_version']!r}", line)
    if _require(obj, "euler_convention", line) != EULER_CONVENTION:
        raise MalformedInput(f"unsupported Euler convention {obj['euler_convention']!r}", line)
    try:
        c = _require(obj, "camera", line)
        cam = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]))
        model = ObjectModel(_array(_require(obj, "model", line), (3,), line, "model"))
        size = tuple(int(v) for v in _require(obj, "image_size", line))
    except MalformedInput:
        raise
    except (ConfposeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"invalid header: {exc}", line) from exc
    digest = content_hash(model, cam)
    if _require(obj, "hash", line) != digest:
        raise MalformedInput("header hash does not match its model and camera", line)
    return DatasetHeader(model, cam, size, digest, obj.get("generator"))


def _parse_record(obj: dict, header: DatasetHeader, line: int) -> DatasetRecord:
    if obj.get("type") != "sample":
        raise MalformedInput(f"unexpected record type {obj.get('type')!r}", line)
    n = len(header.model)
    try:
        pose = _require(obj, "gt_pose", line)
        gt_pose = Pose6D(pose["euler"], pose["translation"])
        gt_kp = _array(_require(obj, "gt_keypoints", line), (2,), line, "gt_keypoints")
        means = _array(_require(obj, "pred_means", line), (2,), line, "pred_means")
        tri = _array(_require(obj, "pred_covs", line), (3,), line, "pred_covs")
        for name, arr in (("gt_keypoints", gt_kp), ("pred_means", means), ("pred_covs", tri)):
            if arr.shape[0] != n:
                raise MalformedInput(f"{name} has {arr.shape[0]} keypoints, model has {n}", line)
        covs = np.empty((n, 2, 2))
        covs[:, 0, 0], covs[:, 1, 1] = tri[:, 0], tri[:, 2]
        covs[:, 0, 1] = covs[:, 1, 0] = tri[:, 1]
        pred = GaussianKeypointSet(means, covs)
        index = int(_require(obj, "index", line))
    except MalformedInput:
        raise
    except (ConfposeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(str(exc), line) from exc
    return DatasetRecord(index, gt_pose, gt_kp, pred)


def read_dataset(path) -> tuple[DatasetHeader, list[DatasetRecord]]:
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, text in enumerate(fh, start=1):
            if not text.strip():
                raise MalformedInput("blank line", line_no)
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise MalformedInput(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(obj, dict):
                raise MalformedInput("record is not a JSON object", line_no)
            if header is None:
                header = _parse_header(obj, line_no)
            else:
                records.append(_parse_record(obj, header, line_no))
    if header is None:
        raise MalformedInput("empty dataset", 1)
    return header, records


def write_calibration(path, model: CalibrationModel, epsilon: float, dataset_hash: str, quantile: float) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "hash": dataset_hash,
        "epsilon": float(epsilon),
        "scale_exponent": model.scale_exponent,
        "n_scores": len(model),
        "quantile": float(quantile),
        "scores": model.scores.tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(doc) + "\n")


def read_calibration(path) -> tuple[CalibrationModel, float, str]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
        model = CalibrationModel(doc["scores"], doc["scale_exponent"])
        return model, float(doc["epsilon"]), str(doc["hash"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"invalid calibration file: {exc}", 1) from exc


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return to_jsonable(asdict(obj))
    return obj
