"""Compare the compiled and numpy PnP kernels on identical synthetic problems.

    python3 benchmarks/bench_kernels.py [--scenes 20] [--batch 1000]
"""
import argparse
import time

import numpy as np

from confpose import kernels
from confpose.conformal import calibrate_arrays, predict_region
from confpose.pnp import LEAST_SQUARES, PnPProblem, initial_pose
from confpose.sampler import sample_disks
from confpose.synth import SceneConfig, generate, image_diagonal


def _problems(n):
    cfg = SceneConfig(rng_seed=11)
    cal = generate(cfg, 200)
    calib = calibrate_arrays([s.gt_keypoints2d for s in cal], [s.predicted for s in cal])
    out = []
    for s in generate(cfg, n, start_index=200):
        prob = PnPProblem(s.model_ref, s.predicted, s.cam)
        out.append((prob, initial_pose(prob).as_vector(), predict_region(s.predicted, calib, 0.1, image_diagonal())))
    return out


def _time(fn, repeat=3):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--batch", type=int, default=1000)
    args = ap.parse_args()
    backends = kernels.available_backends()
    probs = _problems(args.scenes)
    eye = np.broadcast_to(np.eye(2), (len(probs[0][0]), 2, 2)).copy()
    c = LEAST_SQUARES
    print(f"{'kernel':<26}{'backend':<10}{'ms/call':>12}")
    results = {}
    for name, mod in backends.items():

        def single():
            for prob, y0, _ in probs:
                mod.solve_pnp(prob.model.points3d, prob.observations.means, eye, y0, prob.cam.as_array(),
                              kernels.LOSS_SQUARED, c.huber_delta, c.max_iters, c.grad_tol, c.initial_damping, c.step_tol)

        prob, y0, reg = probs[0]
        rng = np.random.default_rng(0)
        draws = np.stack([sample_disks(reg, rng) for _ in range(args.batch)])

        def batch():
            mod.solve_pnp_batch(prob.model.points3d, draws, eye, y0, prob.cam.as_array(),
                                kernels.LOSS_SQUARED, c.huber_delta, c.max_iters, c.grad_tol, c.initial_damping, c.step_tol)

        t_single = _time(single) / len(probs) * 1e3
        t_batch = _time(batch, repeat=1 if name == "python" else 3) / args.batch * 1e3
        results[name] = (t_single, t_batch)
        print(f"{'solve_pnp':<26}{name:<10}{t_single:>12.4f}")
        print(f"{'solve_pnp_batch (per row)':<26}{name:<10}{t_batch:>12.4f}")
    if len(results) == 2:
        print(f"speed-up single {results['python'][0] / results['cython'][0]:.1f}x, "
              f"batch {results['python'][1] / results['cython'][1]:.1f}x")


if __name__ == "__main__":
    main()
