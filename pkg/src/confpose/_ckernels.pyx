# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled PnP kernels. Same API and arithmetic as ``_pykernels``."""
import numpy as np

from libc.math cimport cos, sin, sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free

cdef enum:
    NP = 6

cdef double DEPTH_EPS_C = 1e-9
cdef double WEIGHT_FLOOR_C = 1e-6
cdef double PIVOT_RATIO_MIN_C = 1e-14
cdef double MU_MIN_C = 1e-15
cdef double MU_MAX_C = 1e16
cdef double COST_RESOLUTION_C = 1e-12
cdef int FLAT_LIMIT_C = 10

DEPTH_EPS = DEPTH_EPS_C
LOSS_SQUARED = 0
LOSS_HUBER = 1
CONVERGED = 0
MAX_ITERS = 1
STALLED = 2
SINGULAR = 3
BEHIND_AT_INIT = 4


cdef void _rot(const double* y, double* R, double* dR) noexcept nogil:
    cdef double ca = cos(y[0]), sa = sin(y[0])
    cdef double cb = cos(y[1]), sb = sin(y[1])
    cdef double cc = cos(y[2]), sc = sin(y[2])
    R[0] = ca * cb; R[1] = ca * sb * sc - sa * cc; R[2] = ca * sb * cc + sa * sc
    R[3] = sa * cb; R[4] = sa * sb * sc + ca * cc; R[5] = sa * sb * cc - ca * sc
    R[6] = -sb;     R[7] = cb * sc;                R[8] = cb * cc
    if dR == NULL:
        return
    # yaw
    dR[0] = -sa * cb; dR[1] = -sa * sb * sc - ca * cc; dR[2] = -sa * sb * cc + ca * sc
    dR[3] = ca * cb;  dR[4] = ca * sb * sc - sa * cc;  dR[5] = ca * sb * cc + sa * sc
    dR[6] = 0.0;      dR[7] = 0.0;                     dR[8] = 0.0
    # pitch
    dR[9] = -ca * sb;  dR[10] = ca * cb * sc; dR[11] = ca * cb * cc
    dR[12] = -sa * sb; dR[13] = sa * cb * sc; dR[14] = sa * cb * cc
    dR[15] = -cb;      dR[16] = -sb * sc;     dR[17] = -sb * cc
    # roll
    dR[18] = 0.0; dR[19] = ca * sb * cc + sa * sc; dR[20] = -ca * sb * sc + sa * cc
    dR[21] = 0.0; dR[22] = sa * sb * cc - ca * sc; dR[23] = -sa * sb * sc - ca * cc
    dR[24] = 0.0; dR[25] = cb * cc;                dR[26] = -cb * sc


cdef int _project(const double[:, ::1] pts, const double* y, const double* cam,
                  double* uv, double* jac, double* depth) noexcept nogil:
    """Fill uv (2N), jac (2N x 6, row-major) if non-NULL, depth (N). Returns 1 if any depth <= eps."""
    cdef double R[9]
    cdef double dR[27]
    cdef Py_ssize_t n, k, N = pts.shape[0]
    cdef double X, Y, Z, iz, x0, x1, x2, dX, dY, dZ
    cdef int behind = 0
    if jac != NULL:
        _rot(y, R, dR)
    else:
        _rot(y, R, NULL)
    for n in range(N):
        x0 = pts[n, 0]; x1 = pts[n, 1]; x2 = pts[n, 2]
        X = R[0] * x0 + R[1] * x1 + R[2] * x2 + y[3]
        Y = R[3] * x0 + R[4] * x1 + R[5] * x2 + y[4]
        Z = R[6] * x0 + R[7] * x1 + R[8] * x2 + y[5]
        depth[n] = Z
        if Z <= DEPTH_EPS_C:
            behind = 1
        iz = 1.0 / Z
        uv[2 * n] = cam[0] * X * iz + cam[2]
        uv[2 * n + 1] = cam[1] * Y * iz + cam[3]
        if jac != NULL:
            for k in range(3):
                dX = dR[9 * k + 0] * x0 + dR[9 * k + 1] * x1 + dR[9 * k + 2] * x2
                dY = dR[9 * k + 3] * x0 + dR[9 * k + 4] * x1 + dR[9 * k + 5] * x2
                dZ = dR[9 * k + 6] * x0 + dR[9 * k + 7] * x1 + dR[9 * k + 8] * x2
                jac[(2 * n) * NP + k] = cam[0] * iz * (dX - X * iz * dZ)
                jac[(2 * n + 1) * NP + k] = cam[1] * iz * (dY - Y * iz * dZ)
            jac[(2 * n) * NP + 3] = cam[0] * iz
            jac[(2 * n) * NP + 4] = 0.0
            jac[(2 * n) * NP + 5] = -cam[0] * iz * X * iz
            jac[(2 * n + 1) * NP + 3] = 0.0
            jac[(2 * n + 1) * NP + 4] = cam[1] * iz
            jac[(2 * n + 1) * NP + 5] = -cam[1] * iz * Y * iz
    return behind


def project_jacobian(points, pose, cam):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] y = np.ascontiguousarray(pose, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(cam, dtype=np.float64)
    cdef Py_ssize_t N = pts.shape[0]
    uv = np.empty((N, 2))
    jac = np.empty((N, 2, 6))
    depth = np.empty(N)
    cdef double[:, ::1] uv_v = uv
    cdef double[:, :, ::1] jac_v = jac
    cdef double[::1] d_v = depth
    if N > 0:
        _project(pts, &y[0], &c[0], &uv_v[0, 0], &jac_v[0, 0, 0], &d_v[0])
    return uv, jac, depth


cdef struct Work:
    double* uv
    double* jac
    double* depth
    double* Wr
    double* drho


cdef int _terms(const double[:, ::1] pts, const double[:, ::1] obs, const double[:, :, ::1] winv,
                const double* y, const double* cam, int loss, double delta,
                Work* w, double* cost) noexcept nogil:
    """Evaluate cost, weighted residuals and Huber derivative. Returns 1 if behind camera."""
    cdef Py_ssize_t n, N = pts.shape[0]
    cdef double r0, r1, e, total = 0.0
    if _project(pts, y, cam, w.uv, w.jac, w.depth):
        return 1
    for n in range(N):
        r0 = obs[n, 0] - w.uv[2 * n]
        r1 = obs[n, 1] - w.uv[2 * n + 1]
        w.Wr[2 * n] = winv[n, 0, 0] * r0 + winv[n, 0, 1] * r1
        w.Wr[2 * n + 1] = winv[n, 1, 0] * r0 + winv[n, 1, 1] * r1
        e = r0 * w.Wr[2 * n] + r1 * w.Wr[2 * n + 1]
        if loss == 1:
            if e <= delta:
                total += 0.5 * e * e
                w.drho[n] = e
            else:
                total += delta * (fabs(e) - 0.5 * delta)
                w.drho[n] = delta
        else:
            total += e
            w.drho[n] = 1.0
    cost[0] = total
    return 0


cdef double _gradient(Py_ssize_t N, Work* w, double* b) noexcept nogil:
    """b = sum_n drho_n J_n^T W_n r_n; returns |grad| = 2 |b|."""
    cdef Py_ssize_t n, j
    cdef double s = 0.0
    for j in range(NP):
        b[j] = 0.0
    for n in range(N):
        for j in range(NP):
            b[j] += w.drho[n] * (w.jac[(2 * n) * NP + j] * w.Wr[2 * n] + w.jac[(2 * n + 1) * NP + j] * w.Wr[2 * n + 1])
    for j in range(NP):
        s += b[j] * b[j]
    return 2.0 * sqrt(s)


cdef void _normal(Py_ssize_t N, const double[:, :, ::1] winv, Work* w, int loss, double delta,
                  double* H) noexcept nogil:
    """Floored IRLS term plus 2 rho'' g g^T with g_n = J_n^T W_n r_n."""
    cdef Py_ssize_t n, i, j
    cdef double wmax = 0.0, wn, a0, a1, j0i, j1i
    cdef double g[6]
    for n in range(N):
        if w.drho[n] > wmax:
            wmax = w.drho[n]
    for i in range(NP * NP):
        H[i] = 0.0
    for n in range(N):
        wn = w.drho[n]
        if wn < WEIGHT_FLOOR_C * wmax:
            wn = WEIGHT_FLOOR_C * wmax
        for i in range(NP):
            j0i = w.jac[(2 * n) * NP + i]
            j1i = w.jac[(2 * n + 1) * NP + i]
            # (W J)_{:, i}
            a0 = winv[n, 0, 0] * j0i + winv[n, 0, 1] * j1i
            a1 = winv[n, 1, 0] * j0i + winv[n, 1, 1] * j1i
            for j in range(NP):
                H[j * NP + i] += wn * (w.jac[(2 * n) * NP + j] * a0 + w.jac[(2 * n + 1) * NP + j] * a1)
        if loss == 1 and w.drho[n] < delta:
            for i in range(NP):
                g[i] = w.jac[(2 * n) * NP + i] * w.Wr[2 * n] + w.jac[(2 * n + 1) * NP + i] * w.Wr[2 * n + 1]
            for i in range(NP):
                for j in range(NP):
                    H[j * NP + i] += 2.0 * g[i] * g[j]


cdef int _damped_solve(const double* H, const double* b, double mu, double* x) noexcept nogil:
    cdef double A[36]
    cdef double L[36]
    cdef double s[6]
    cdef double z[6]
    cdef double v, pmin, pmax, p
    cdef Py_ssize_t i, j, k
    for i in range(NP):
        if not (H[i * NP + i] > 0.0) or H[i * NP + i] == INFINITY:
            return 1
        s[i] = 1.0 / sqrt(H[i * NP + i])
    for i in range(NP):
        for j in range(NP):
            A[i * NP + j] = H[i * NP + j] * s[i] * s[j]
            L[i * NP + j] = 0.0
        A[i * NP + i] += mu
    for j in range(NP):
        v = A[j * NP + j]
        for k in range(j):
            v -= L[j * NP + k] * L[j * NP + k]
        if not (v > 0.0):
            return 1
        L[j * NP + j] = sqrt(v)
        for i in range(j + 1, NP):
            v = A[i * NP + j]
            for k in range(j):
                v -= L[i * NP + k] * L[j * NP + k]
            L[i * NP + j] = v / L[j * NP + j]
    pmin = L[0] * L[0]
    pmax = pmin
    for i in range(1, NP):
        p = L[i * NP + i] * L[i * NP + i]
        if p < pmin:
            pmin = p
        if p > pmax:
            pmax = p
    if pmin < PIVOT_RATIO_MIN_C * pmax:
        return 1
    for i in range(NP):
        v = b[i] * s[i]
        for k in range(i):
            v -= L[i * NP + k] * z[k]
        z[i] = v / L[i * NP + i]
    for i in range(NP - 1, -1, -1):
        v = z[i]
        for k in range(i + 1, NP):
            v -= L[k * NP + i] * x[k]
        x[i] = v / L[i * NP + i]
    for i in range(NP):
        x[i] *= s[i]
    return 0


cdef int _solve_core(const double[:, ::1] pts, const double[:, ::1] obs, const double[:, :, ::1] winv,
                     double* y, const double* cam, int loss, double delta, int max_iters,
                     double grad_tol, double damping, double step_tol,
                     Work* cur, Work* nxt, double* cost_out, int* iters_out, double* gnorm_out) noexcept nogil:
    cdef Py_ssize_t N = pts.shape[0]
    cdef double H[36]
    cdef double b[6]
    cdef double bn[6]
    cdef double step[6]
    cdef double trial[6]
    cdef double cost, new_cost, gnorm, mu = damping, sn, yn
    cdef int it = 0, status = 1, step_small = 0, accepted, flat = 0
    cdef Work tmp
    cdef Py_ssize_t j
    if _terms(pts, obs, winv, y, cam, loss, delta, cur, &cost):
        cost_out[0] = INFINITY
        iters_out[0] = 0
        gnorm_out[0] = INFINITY
        return 4
    while True:
        gnorm = _gradient(N, cur, b)
        if cost == 0.0 or (step_small and gnorm <= grad_tol * (cost if cost > 1.0 else 1.0)):
            status = 0
            break
        if step_small and flat >= FLAT_LIMIT_C:
            status = 2
            break
        if it >= max_iters:
            break
        it += 1
        _normal(N, winv, cur, loss, delta, H)
        accepted = 0
        while True:
            if _damped_solve(H, b, mu, step):
                status = 3
                break
            for j in range(NP):
                trial[j] = y[j] + step[j]
            if not _terms(pts, obs, winv, trial, cam, loss, delta, nxt, &new_cost) and (
                new_cost <= cost
                or (new_cost - cost <= COST_RESOLUTION_C * cost and _gradient(N, nxt, bn) < gnorm)
            ):
                sn = 0.0
                yn = 0.0
                for j in range(NP):
                    y[j] = trial[j]
                    sn += step[j] * step[j]
                    yn += y[j] * y[j]
                if cost - new_cost > COST_RESOLUTION_C * cost:
                    flat = 0
                else:
                    flat += 1
                cost = new_cost
                tmp = cur[0]
                cur[0] = nxt[0]
                nxt[0] = tmp
                mu = mu / 10.0
                if mu < MU_MIN_C:
                    mu = MU_MIN_C
                step_small = sqrt(sn) <= step_tol * (1.0 + sqrt(yn))
                accepted = 1
                break
            mu *= 10.0
            if mu > MU_MAX_C:
                status = 2
                break
        if not accepted:
            break
    gnorm_out[0] = _gradient(N, cur, b)
    cost_out[0] = cost
    iters_out[0] = it
    return status


cdef int _alloc(Work* w, Py_ssize_t N) noexcept nogil:
    w.uv = <double*> malloc(2 * N * sizeof(double))
    w.jac = <double*> malloc(2 * N * NP * sizeof(double))
    w.depth = <double*> malloc(N * sizeof(double))
    w.Wr = <double*> malloc(2 * N * sizeof(double))
    w.drho = <double*> malloc(N * sizeof(double))
    return w.uv == NULL or w.jac == NULL or w.depth == NULL or w.Wr == NULL or w.drho == NULL


cdef void _release(Work* w) noexcept nogil:
    free(w.uv); free(w.jac); free(w.depth); free(w.Wr); free(w.drho)


def solve_pnp(points, obs, winv, pose0, cam, int loss, double delta, int max_iters,
              double grad_tol, double damping, double step_tol):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] o = np.ascontiguousarray(obs, dtype=np.float64)
    cdef const double[:, :, ::1] W = np.ascontiguousarray(winv, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(cam, dtype=np.float64)
    pose = np.array(pose0, dtype=np.float64)
    cdef double[::1] y = pose
    cdef Work a, b
    cdef double cost, gnorm
    cdef int iters, status
    cdef Py_ssize_t N = pts.shape[0]
    if _alloc(&a, N) or _alloc(&b, N):
        _release(&a); _release(&b)
        raise MemoryError()
    with nogil:
        status = _solve_core(pts, o, W, &y[0], &c[0], loss, delta, max_iters, grad_tol, damping,
                             step_tol, &a, &b, &cost, &iters, &gnorm)
    _release(&a); _release(&b)
    return pose, cost, iters, gnorm, status


def solve_pnp_batch(points, obs_batch, winv, pose0, cam, int loss, double delta, int max_iters,
                    double grad_tol, double damping, double step_tol):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, :, ::1] ob = np.ascontiguousarray(obs_batch, dtype=np.float64)
    cdef const double[:, :, ::1] W = np.ascontiguousarray(winv, dtype=np.float64)
    cdef const double[::1] c = np.ascontiguousarray(cam, dtype=np.float64)
    cdef const double[::1] y0 = np.ascontiguousarray(pose0, dtype=np.float64)
    cdef Py_ssize_t T = ob.shape[0], N = pts.shape[0], t, j
    poses = np.empty((T, 6))
    costs = np.empty(T)
    status = np.empty(T, dtype=np.int64)
    cdef double[:, ::1] pv = poses
    cdef double[::1] cv = costs
    cdef long long[::1] sv = status
    cdef Work a, b
    cdef double cost, gnorm
    cdef int iters
    if _alloc(&a, N) or _alloc(&b, N):
        _release(&a); _release(&b)
        raise MemoryError()
    with nogil:
        for t in range(T):
            for j in range(NP):
                pv[t, j] = y0[j]
            sv[t] = _solve_core(pts, ob[t], W, &pv[t, 0], &c[0], loss, delta, max_iters, grad_tol,
                                damping, step_tol, &a, &b, &cost, &iters, &gnorm)
            cv[t] = cost
    _release(&a); _release(&b)
    return poses, costs, status
