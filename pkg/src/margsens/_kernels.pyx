# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled GPD likelihood and simplex kernels.

Same algorithms and return conventions as ``_kernels_py``.
"""
import numpy as np

from libc.math cimport exp, log, log1p, fabs, floor, pow, isfinite, INFINITY

cdef enum:
    MAXD = 8

cdef double XI_LOWER = -0.9
cdef double XI_UPPER = 1.0
cdef double XI_ZERO = 1e-8

cdef double _RHO = 1.0
cdef double _CHI = 2.0
cdef double _PSI = 0.5
cdef double _SIGMA = 0.5


ctypedef struct Problem:
    const double* x
    const double* design
    Py_ssize_t n
    Py_ssize_t p      # number of scale coefficients; 0 = stationary model


cdef double _nll_stationary(const double* x, Py_ssize_t n, double log_sigma, double xi) noexcept nogil:
    cdef double sigma, s = 0.0, z, val
    cdef Py_ssize_t i
    if not isfinite(log_sigma) or not (XI_LOWER < xi < XI_UPPER):
        return INFINITY
    sigma = exp(log_sigma)
    if fabs(xi) < XI_ZERO:
        for i in range(n):
            s += x[i]
        return n * log_sigma + s / sigma
    for i in range(n):
        z = xi * x[i] / sigma
        if z <= -1.0:
            return INFINITY
        s += log1p(z)
    val = n * log_sigma + (1.0 + 1.0 / xi) * s
    return val if isfinite(val) else INFINITY


cdef double _nll_ns(const double* x, const double* design, Py_ssize_t n, Py_ssize_t p,
                    const double* theta) noexcept nogil:
    cdef double xi = theta[p], eta, s_eta = 0.0, s = 0.0, z, val
    cdef Py_ssize_t i, j
    if not (XI_LOWER < xi < XI_UPPER):
        return INFINITY
    for j in range(p + 1):
        if not isfinite(theta[j]):
            return INFINITY
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += design[i * p + j] * theta[j]
        if fabs(eta) > 700.0:
            return INFINITY
        s_eta += eta
        if fabs(xi) < XI_ZERO:
            s += x[i] / exp(eta)
        else:
            z = xi * x[i] / exp(eta)
            if z <= -1.0:
                return INFINITY
            s += log1p(z)
    if fabs(xi) < XI_ZERO:
        return s_eta + s
    val = s_eta + (1.0 + 1.0 / xi) * s
    return val if isfinite(val) else INFINITY


cdef inline double _objective(Problem* pb, const double* theta) noexcept nogil:
    if pb.p == 0:
        return _nll_stationary(pb.x, pb.n, theta[0], theta[1])
    return _nll_ns(pb.x, pb.design, pb.n, pb.p, theta)


cdef void _sort_simplex(double* sim, double* fsim, Py_ssize_t n) noexcept nogil:
    # stable insertion sort of n+1 vertices by function value
    cdef Py_ssize_t i, j, k
    cdef double fv
    cdef double tmp[MAXD]
    for i in range(1, n + 1):
        fv = fsim[i]
        for k in range(n):
            tmp[k] = sim[i * n + k]
        j = i - 1
        while j >= 0 and fsim[j] > fv:
            fsim[j + 1] = fsim[j]
            for k in range(n):
                sim[(j + 1) * n + k] = sim[j * n + k]
            j -= 1
        fsim[j + 1] = fv
        for k in range(n):
            sim[(j + 1) * n + k] = tmp[k]


cdef int _nelder_mead(Problem* pb, Py_ssize_t n, double* x0, double step, double xatol,
                      double fatol, long maxiter, double* xout, double* fout,
                      long* itout) noexcept nogil:
    cdef double sim[(MAXD + 1) * MAXD]
    cdef double fsim[MAXD + 1]
    cdef double xbar[MAXD]
    cdef double xr[MAXD]
    cdef double xe[MAXD]
    cdef double xc[MAXD]
    cdef double fxr, fxe, fxc, dx, df
    cdef Py_ssize_t i, j, k
    cdef long it = 0
    cdef int converged = 0, shrink

    for k in range(n):
        sim[k] = x0[k]
    for i in range(1, n + 1):
        for k in range(n):
            sim[i * n + k] = x0[k]
        sim[i * n + i - 1] += step
    for i in range(n + 1):
        fsim[i] = _objective(pb, &sim[i * n])
    _sort_simplex(sim, fsim, n)

    while it < maxiter:
        dx = 0.0
        df = 0.0
        for i in range(1, n + 1):
            for k in range(n):
                if fabs(sim[i * n + k] - sim[k]) > dx:
                    dx = fabs(sim[i * n + k] - sim[k])
            if fabs(fsim[i] - fsim[0]) > df:
                df = fabs(fsim[i] - fsim[0])
        # NaN-safe: inf - inf gives nan, which fails the comparison
        if dx <= xatol and df <= fatol and isfinite(fsim[n]):
            converged = 1
            break
        for k in range(n):
            xbar[k] = 0.0
            for i in range(n):
                xbar[k] += sim[i * n + k]
            xbar[k] /= n
            xr[k] = (1 + _RHO) * xbar[k] - _RHO * sim[n * n + k]
        fxr = _objective(pb, xr)
        shrink = 0
        if fxr < fsim[0]:
            for k in range(n):
                xe[k] = (1 + _RHO * _CHI) * xbar[k] - _RHO * _CHI * sim[n * n + k]
            fxe = _objective(pb, xe)
            if fxe < fxr:
                for k in range(n):
                    sim[n * n + k] = xe[k]
                fsim[n] = fxe
            else:
                for k in range(n):
                    sim[n * n + k] = xr[k]
                fsim[n] = fxr
        elif fxr < fsim[n - 1]:
            for k in range(n):
                sim[n * n + k] = xr[k]
            fsim[n] = fxr
        elif fxr < fsim[n]:
            for k in range(n):
                xc[k] = (1 + _PSI * _RHO) * xbar[k] - _PSI * _RHO * sim[n * n + k]
            fxc = _objective(pb, xc)
            if fxc <= fxr:
                for k in range(n):
                    sim[n * n + k] = xc[k]
                fsim[n] = fxc
            else:
                shrink = 1
        else:
            for k in range(n):
                xc[k] = (1 - _PSI) * xbar[k] + _PSI * sim[n * n + k]
            fxc = _objective(pb, xc)
            if fxc < fsim[n]:
                for k in range(n):
                    sim[n * n + k] = xc[k]
                fsim[n] = fxc
            else:
                shrink = 1
        if shrink:
            for j in range(1, n + 1):
                for k in range(n):
                    sim[j * n + k] = sim[k] + _SIGMA * (sim[j * n + k] - sim[k])
                fsim[j] = _objective(pb, &sim[j * n])
        _sort_simplex(sim, fsim, n)
        it += 1

    for k in range(n):
        xout[k] = sim[k]
    fout[0] = fsim[0]
    itout[0] = it
    return converged


def gpd_nll(x, double log_sigma, double xi):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    if xv.shape[0] == 0:
        return 0.0
    return _nll_stationary(&xv[0], xv.shape[0], log_sigma, xi)


def gpd_ns_nll(x, design, theta):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] dv = np.ascontiguousarray(design, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(theta, dtype=np.float64)
    return _nll_ns(&xv[0], &dv[0, 0], xv.shape[0], dv.shape[1], &tv[0])


def simplex_gpd(x, x0, double xatol=1e-7, double fatol=1e-9, long maxiter=4000):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double start[2]
    cdef double out[2]
    cdef double fval
    cdef long it
    cdef int conv
    cdef Problem pb
    pb.x = &xv[0]
    pb.design = NULL
    pb.n = xv.shape[0]
    pb.p = 0
    start[0] = x0[0]
    start[1] = x0[1]
    with nogil:
        conv = _nelder_mead(&pb, 2, start, 0.1, xatol, fatol, maxiter, out, &fval, &it)
    return np.array([out[0], out[1]]), fval, it, bool(conv)


def simplex_gpd_ns(x, design, x0, double xatol=1e-7, double fatol=1e-9, long maxiter=8000):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] dv = np.ascontiguousarray(design, dtype=np.float64)
    cdef Py_ssize_t p = dv.shape[1], k
    cdef double start[MAXD]
    cdef double out[MAXD]
    cdef double fval
    cdef long it
    cdef int conv
    cdef Problem pb
    if p + 1 > MAXD:
        raise ValueError("too many scale coefficients")
    pb.x = &xv[0]
    pb.design = &dv[0, 0]
    pb.n = xv.shape[0]
    pb.p = p
    for k in range(p + 1):
        start[k] = x0[k]
    with nogil:
        conv = _nelder_mead(&pb, p + 1, start, 0.1, xatol, fatol, maxiter, out, &fval, &it)
    return np.array([out[k] for k in range(p + 1)]), fval, it, bool(conv)


cdef double _gpd_quantile(double p, double sigma, double xi) noexcept nogil:
    if fabs(xi) < XI_ZERO:
        return -sigma * log1p(-p)
    return sigma / xi * (pow(1.0 - p, -xi) - 1.0)


cdef double _sample_quantile(const double* xs, Py_ssize_t n, double p) noexcept nogil:
    cdef double h = (n - 1) * p
    cdef Py_ssize_t lo = <Py_ssize_t>floor(h)
    if lo >= n - 1:
        return xs[n - 1]
    return xs[lo] + (h - lo) * (xs[lo + 1] - xs[lo])


def eqd_bootstrap(sorted_boot, probs, x0, double xatol=1e-6, double fatol=1e-8,
                  long maxiter=2000):
    cdef const double[:, ::1] bv = np.ascontiguousarray(sorted_boot, dtype=np.float64)
    cdef const double[::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t nb = bv.shape[0], n = bv.shape[1], m = pv.shape[0], b, j
    cdef double start[2]
    cdef double out[2]
    cdef double fval, sigma, d, total = 0.0
    cdef long it
    cdef long n_ok = 0, n_fail = 0
    cdef double s0 = x0[0], s1 = x0[1]
    cdef Problem pb
    pb.design = NULL
    pb.n = n
    pb.p = 0
    with nogil:
        for b in range(nb):
            start[0] = s0
            start[1] = s1
            pb.x = &bv[b, 0]
            _nelder_mead(&pb, 2, start, 0.1, xatol, fatol, maxiter, out, &fval, &it)
            if not isfinite(fval):
                n_fail += 1
                continue
            sigma = exp(out[0])
            d = 0.0
            for j in range(m):
                d += fabs(_sample_quantile(&bv[b, 0], n, pv[j]) - _gpd_quantile(pv[j], sigma, out[1]))
            total += d / m
            n_ok += 1
    if n_ok == 0:
        return INFINITY, n_fail
    return total / n_ok, n_fail
