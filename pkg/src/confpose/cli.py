"""Command line: ``confpose generate | calibrate | evaluate``.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 epsilon too small for
the calibration set, 4 malformed input file, 5 dataset / calibration mismatch.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from confpose import io, kernels, metrics, synth
from confpose.conformal import calibrate, quantile
from confpose.errors import ConfposeError, EpsilonTooSmall, MalformedInput
from confpose.ift import ellipsoid_scale, gaussian_radius_factor
from confpose.pipeline import EvalConfig, evaluate_image, image_results

log = logging.getLogger("confpose")

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_EPSILON = 3
EXIT_MALFORMED = 4
EXIT_MISMATCH = 5


class HashMismatch(ConfposeError):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _open_unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    common.add_argument("--no-timing", action="store_true", help="omit wall-clock timings from outputs")

    p = argparse.ArgumentParser(prog="confpose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    d = synth.SceneConfig()
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--start-index", type=int, default=0)
    g.add_argument("--n-keypoints", type=int, default=d.n_keypoints)
    g.add_argument("--model-extent", type=float, default=d.model_extent)
    g.add_argument("--depth-range", type=float, nargs=2, default=list(d.depth_range), metavar=("MIN", "MAX"))
    g.add_argument("--max-rotation", type=float, default=d.max_rotation, help="degrees")
    g.add_argument("--noise-std-range", type=float, nargs=2, default=list(d.noise_std_range), metavar=("MIN", "MAX"))
    g.add_argument("--cov-misspecification", type=float, default=d.cov_misspecification)
    g.add_argument("--out", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="fit conformal calibration scores")
    c.add_argument("--dataset", required=True)
    c.add_argument("--epsilon", type=_open_unit, required=True)
    c.add_argument("--q", type=float, default=0.25, help="covariance determinant exponent")
    c.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", parents=[common], help="build and score pose regions")
    e.add_argument("--dataset", required=True)
    e.add_argument("--model", required=True, help="calibration file from 'calibrate'")
    e.add_argument("--mode", choices=("deterministic", "sampling", "both"), default="deterministic")
    e.add_argument("--scale", choices=("paper", "chi2"), default="chi2")
    th = metrics.Thresholds()
    e.add_argument("--thresholds", type=float, nargs=2, default=[th.tau_R, th.tau_t], metavar=("TAU_R", "TAU_T"))
    e.add_argument("--trials", type=_positive_int, default=1000, help="sampling baseline trials per image")
    e.add_argument("--kp-cov", choices=("conformal", "predicted"), default="conformal")
    e.add_argument("--out", required=True)
    return p


def cmd_generate(args) -> int:
    cfg = synth.SceneConfig(
        n_keypoints=args.n_keypoints,
        model_extent=args.model_extent,
        depth_range=tuple(args.depth_range),
        max_rotation=args.max_rotation,
        noise_std_range=tuple(args.noise_std_range),
        cov_misspecification=args.cov_misspecification,
        rng_seed=args.seed,
    )
    samples = synth.generate(cfg, args.count, args.start_index)
    gen = io.to_jsonable(cfg)
    gen["start_index"] = args.start_index
    io.write_dataset(args.out, samples, args.start_index, gen)
    print(f"wrote {len(samples)} samples (seed {args.seed}) to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    header, records = io.read_dataset(args.dataset)
    if not records:
        raise MalformedInput("dataset has no samples", 2)
    model = calibrate(((r.gt_keypoints, r.predicted) for r in records), args.q)
    alpha = quantile(model, args.epsilon)
    io.write_calibration(args.out, model, args.epsilon, header.hash, alpha)
    print(f"quantile: {alpha!r} (rank {int(np.floor(len(model) * args.epsilon))} of {len(model)}, epsilon {args.epsilon})")
    return 0


def _evaluate_one(job):
    return evaluate_image(*job)


def _series_header(name: str, unit: str, mode: str, scale: str, eps: float) -> str:
    return f"{name} [{unit}] mode={mode} scale={scale} epsilon={eps!r}\none value per line, ascending"


def cmd_evaluate(args) -> int:
    header, records = io.read_dataset(args.dataset)
    calib, eps, calib_hash = io.read_calibration(args.model)
    if calib_hash != header.hash:
        raise HashMismatch(f"calibration hash {calib_hash[:12]} does not match dataset hash {header.hash[:12]}")
    quantile(calib, eps)
    th = metrics.Thresholds(*args.thresholds)
    chi2_mode = args.scale == "chi2"
    cfg = EvalConfig(
        epsilon=eps,
        mode=args.mode,
        chi2_calibrated=chi2_mode,
        thresholds=th,
        trials=args.trials,
        kp_cov_source=args.kp_cov,
        seed=args.seed,
        image_diagonal=float(np.hypot(*header.image_size)),
    )
    jobs = [(r.index, header.model, header.cam, r.predicted, r.gt_pose, r.gt_keypoints, calib, cfg) for r in records]
    t0 = time.perf_counter()
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            per_image = list(pool.map(_evaluate_one, jobs, chunksize=max(1, len(jobs) // (4 * args.jobs))))
    else:
        per_image = [_evaluate_one(j) for j in jobs]
    total_ms = (time.perf_counter() - t0) * 1e3
    log.info("evaluated %d images in %.1f ms", len(per_image), total_ms)

    keys = [k for k in ("deterministic", "sampling") if args.mode in (k, "both")]
    summary = {}
    out = Path(args.out)
    box_lines = [
        f"# volume distributions; V_R in deg^3, V_t in m^3; scale={args.scale} epsilon={eps!r}",
        "# series\tn\tq1\tmedian\tq3\twhisker_lo\twhisker_hi\tn_outliers",
    ]
    for key in keys:
        rows = image_results(per_image, key)
        failures = sum(1 for img in per_image if "error" in img.get(key, {}))
        rep = metrics.summarize(rows, th) if rows else None
        summary[key] = io.to_jsonable(rep) if rep is not None else None
        if summary[key] is not None:
            summary[key]["failures"] = failures
        for name, unit, col in (("V_R", "deg^3", 0), ("V_t", "m^3", 1)):
            values = [v[col] for v in (rep.volume_samples if rep else [])]
            text = metrics.cdf_columns(values, _series_header(name, unit, key, args.scale, eps))
            Path(f"{out.with_suffix('')}.{key}.{name}.cdf.txt").write_text(text, encoding="utf-8")
            b = metrics.boxplot_stats(values)
            cells = [f"{key}.{name}", str(b["n"])] + [
                repr(b[k]) if b[k] is not None else "NA" for k in ("q1", "median", "q3", "whisker_lo", "whisker_hi")
            ]
            box_lines.append("\t".join(cells + [str(len(b["outliers"]))]))
    Path(f"{out.with_suffix('')}.boxplot.tsv").write_text("\n".join(box_lines) + "\n", encoding="utf-8")

    if len(keys) == 2:
        summary["paired"] = _paired(per_image)

    if args.no_timing:
        for img in per_image:
            img.pop("timing_ms", None)
    report = {
        "format_version": io.FORMAT_VERSION,
        "config": {
            "dataset_hash": header.hash,
            "epsilon": eps,
            "q": calib.scale_exponent,
            "calibration_size": len(calib),
            "calibration_quantile": quantile(calib, eps),
            "kappa_mode": "sqrt(chi2_2 quantile at 1-epsilon)",
            "kappa": gaussian_radius_factor(eps),
            "kp_cov_source": args.kp_cov,
            "scale_mode": args.scale,
            "ellipsoid_scale": ellipsoid_scale(eps, chi2_mode),
            "thresholds": {"tau_R_deg3": th.tau_R, "tau_t_m3": th.tau_t},
            "mode": args.mode,
            "trials": args.trials if args.mode != "deterministic" else None,
            "seed": args.seed,
            "euler_convention": io.EULER_CONVENTION,
            "euler_wrapping": "per-axis shortest signed difference",
            "image_diagonal": cfg.image_diagonal,
            "backend": kernels.BACKEND,
            "n_images": len(per_image),
        },
        "summary": summary,
        "images": per_image,
    }
    if not args.no_timing:
        report["timing_ms"] = _timing_summary(per_image, total_ms)
    out.write_text(io.dumps(io.to_jsonable(report)) + "\n", encoding="utf-8")
    print(f"wrote report for {len(per_image)} images to {out}")
    return 0


def _paired(per_image: list[dict]) -> dict:
    red = {"V_R": [], "V_t": []}
    for img in per_image:
        d, s = img.get("deterministic", {}), img.get("sampling", {})
        for k in red:
            if d.get(k) is not None and s.get(k):
                red[k].append(100.0 * (1.0 - d[k] / s[k]))
    return {
        f"{k}_reduction_pct": {
            "n": len(v),
            "median": float(np.median(v)) if v else None,
            "fraction_deterministic_smaller": float(np.mean(np.asarray(v) > 0)) if v else None,
        }
        for k, v in red.items()
    }


def _timing_summary(per_image: list[dict], total_ms: float) -> dict:
    stages: dict[str, list] = {}
    for img in per_image:
        for k, v in img.get("timing_ms", {}).items():
            stages.setdefault(k, []).append(v)
    return {
        "total": total_ms,
        "per_stage_mean": {k: float(np.mean(v)) for k, v in sorted(stages.items())},
        "per_stage_sum": {k: float(np.sum(v)) for k, v in sorted(stages.items())},
    }


COMMANDS = {"generate": cmd_generate, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    level = os.environ.get("CONFPOSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except EpsilonTooSmall as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EPSILON
    except MalformedInput as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except HashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfposeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
