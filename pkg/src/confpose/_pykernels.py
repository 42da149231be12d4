"""Pure numpy implementation of the PnP hot kernels.

Mirrors ``_ckernels.pyx`` function for function; both are exercised by the
test-suite and compared in ``benchmarks/bench_kernels.py``.
"""
import math

import numpy as np

DEPTH_EPS = 1e-9
LOSS_SQUARED = 0
LOSS_HUBER = 1

CONVERGED = 0
MAX_ITERS = 1
STALLED = 2
SINGULAR = 3
BEHIND_AT_INIT = 4

WEIGHT_FLOOR = 1e-6
PIVOT_RATIO_MIN = 1e-14
MU_MIN = 1e-15
MU_MAX = 1e16
# cost differences below this relative size are rounding noise
COST_RESOLUTION = 1e-12
# accepted tiny steps in a row without a resolvable cost decrease before giving up as stalled
FLAT_LIMIT = 10


def rotation_derivatives(euler):
    """Return R and its partials with respect to yaw, pitch and roll."""
    a, b, c = euler
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    R = np.array(
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    )
    dR = np.array(
        [
            [
                [-sa * cb, -sa * sb * sc - ca * cc, -sa * sb * cc + ca * sc],
                [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
                [0.0, 0.0, 0.0],
            ],
            [
                [-ca * sb, ca * cb * sc, ca * cb * cc],
                [-sa * sb, sa * cb * sc, sa * cb * cc],
                [-cb, -sb * sc, -sb * cc],
            ],
            [
                [0.0, ca * sb * cc + sa * sc, -ca * sb * sc + sa * cc],
                [0.0, sa * sb * cc - ca * sc, -sa * sb * sc - ca * cc],
                [0.0, cb * cc, -cb * sc],
            ],
        ]
    )
    return R, dR


def project_jacobian(points, pose, cam):
    """Project ``points`` (N, 3) under ``pose`` (6,) with ``cam`` = (fx, fy, cx, cy).

    Returns ``(uv, jac, depth)`` with ``uv`` (N, 2), ``jac`` (N, 2, 6) the
    derivative of each projection with respect to the pose, and ``depth`` (N,).
    """
    points = np.asarray(points, dtype=float)
    pose = np.asarray(pose, dtype=float)
    fx, fy, cx, cy = cam
    R, dR = rotation_derivatives(pose[:3])
    P = points @ R.T + pose[3:6]
    X, Y, Z = P[:, 0], P[:, 1], P[:, 2]
    iz = 1.0 / Z
    uv = np.column_stack([fx * X * iz + cx, fy * Y * iz + cy])
    # dP/dy: (N, 3, 6)
    dP = np.empty((points.shape[0], 3, 6))
    dP[:, :, :3] = np.einsum("kij,nj->nik", dR, points)
    dP[:, :, 3:] = np.eye(3)
    jac = np.empty((points.shape[0], 2, 6))
    jac[:, 0, :] = fx * iz[:, None] * (dP[:, 0, :] - (X * iz)[:, None] * dP[:, 2, :])
    jac[:, 1, :] = fy * iz[:, None] * (dP[:, 1, :] - (Y * iz)[:, None] * dP[:, 2, :])
    return uv, jac, Z


def _cost_terms(points, obs, winv, pose, cam, loss, delta, need_jac):
    if need_jac:
        uv, jac, depth = project_jacobian(points, pose, cam)
    else:
        R, _ = rotation_derivatives(pose[:3])
        P = points @ R.T + pose[3:6]
        depth = P[:, 2]
        jac = None
        uv = np.column_stack([cam[0] * P[:, 0] / depth + cam[2], cam[1] * P[:, 1] / depth + cam[3]])
    if np.any(depth <= DEPTH_EPS):
        return None
    r = obs - uv
    Wr = np.einsum("nij,nj->ni", winv, r)
    e = np.einsum("ni,ni->n", r, Wr)
    if loss == LOSS_HUBER:
        quad = e <= delta
        rho = np.where(quad, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
        drho = np.where(quad, e, delta)
    else:
        rho = e
        drho = np.ones_like(e)
    return float(rho.sum()), Wr, jac, drho


def _damped_solve(H, b, mu):
    """Solve (H + mu diag(H)) x = b with a Jacobi-scaled Cholesky.

    Returns None when the scaled system is singular or its pivot ratio falls
    below ``PIVOT_RATIO_MIN``.
    """
    d = np.diag(H).copy()
    if not np.all(d > 0) or not np.all(np.isfinite(H)):
        return None
    s = 1.0 / np.sqrt(d)
    A = H * s[:, None] * s[None, :]
    A[np.diag_indices(6)] += mu
    n = 6
    L = np.zeros((6, 6))
    for j in range(n):
        v = A[j, j] - L[j, :j] @ L[j, :j]
        if not v > 0:
            return None
        L[j, j] = math.sqrt(v)
        for i in range(j + 1, n):
            L[i, j] = (A[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    piv = np.diag(L) ** 2
    if piv.min() < PIVOT_RATIO_MIN * piv.max():
        return None
    rhs = b * s
    z = np.empty(6)
    for i in range(n):
        z[i] = (rhs[i] - L[i, :i] @ z[:i]) / L[i, i]
    x = np.empty(6)
    for i in range(n - 1, -1, -1):
        x[i] = (z[i] - L[i + 1 :, i] @ x[i + 1 :]) / L[i, i]
    return x * s


def _acceptable(new, cost, gnorm):
    new_cost, Wr, jac, drho = new
    if new_cost <= cost:
        return True
    if new_cost - cost > COST_RESOLUTION * cost:
        return False
    # within rounding of the old cost: require the gradient to shrink instead
    return 2.0 * float(np.linalg.norm(np.einsum("n,nij,ni->j", drho, jac, Wr))) < gnorm


def solve_pnp(points, obs, winv, pose0, cam, loss, delta, max_iters, grad_tol, damping, step_tol, trace=None):
    """Damped Gauss-Newton with Huber reweighting.

    Returns ``(pose, cost, iterations, grad_norm, status)``. If ``trace`` is a
    list, the initial cost and every accepted cost are appended to it.
    """
    points = np.asarray(points, dtype=float)
    obs = np.asarray(obs, dtype=float)
    winv = np.asarray(winv, dtype=float)
    cam = tuple(float(v) for v in cam)
    pose = np.array(pose0, dtype=float)
    terms = _cost_terms(points, obs, winv, pose, cam, loss, delta, True)
    if terms is None:
        return pose, math.inf, 0, math.inf, BEHIND_AT_INIT
    cost, Wr, jac, drho = terms
    if trace is not None:
        trace.append(cost)
    mu = damping
    it = 0
    step_small = False
    flat = 0
    status = MAX_ITERS
    while True:
        b = np.einsum("n,nij,ni->j", drho, jac, Wr)
        gnorm = 2.0 * float(np.linalg.norm(b))
        if cost == 0.0 or (step_small and gnorm <= grad_tol * max(1.0, cost)):
            status = CONVERGED
            break
        if step_small and flat >= FLAT_LIMIT:
            status = STALLED
            break
        if it >= max_iters:
            break
        it += 1
        w = np.maximum(drho, WEIGHT_FLOOR * drho.max())
        H = np.einsum("n,nki,nkl,nlj->ij", w, jac, winv, jac)
        if loss == LOSS_HUBER:
            # second derivative of the Huber branch: 1 where quadratic, 0 where linear
            g = np.einsum("nij,ni->nj", jac, Wr)[drho < delta]
            H += 2.0 * g.T @ g
        while True:
            step = _damped_solve(H, b, mu)
            if step is None:
                status = SINGULAR
                break
            trial = pose + step
            new = _cost_terms(points, obs, winv, trial, cam, loss, delta, True)
            if new is not None and _acceptable(new, cost, gnorm):
                pose = trial
                flat = 0 if cost - new[0] > COST_RESOLUTION * cost else flat + 1
                cost, Wr, jac, drho = new
                if trace is not None:
                    trace.append(cost)
                mu = max(mu / 10.0, MU_MIN)
                step_small = float(np.linalg.norm(step)) <= step_tol * (1.0 + float(np.linalg.norm(pose)))
                break
            mu *= 10.0
            if mu > MU_MAX:
                status = STALLED
                break
        if status in (SINGULAR, STALLED):
            break
    b = np.einsum("n,nij,ni->j", drho, jac, Wr)
    gnorm = 2.0 * float(np.linalg.norm(b))
    return pose, cost, it, gnorm, status


def solve_pnp_batch(points, obs_batch, winv, pose0, cam, loss, delta, max_iters, grad_tol, damping, step_tol):
    """Solve one problem per row of ``obs_batch`` (T, N, 2), all from ``pose0``."""
    obs_batch = np.asarray(obs_batch, dtype=float)
    T = obs_batch.shape[0]
    poses = np.empty((T, 6))
    costs = np.empty(T)
    status = np.empty(T, dtype=np.int64)
    for t in range(T):
        p, c, _, _, s = solve_pnp(
            points, obs_batch[t], winv, pose0, cam, loss, delta, max_iters, grad_tol, damping, step_tol
        )
        poses[t], costs[t], status[t] = p, c, s
    return poses, costs, status
