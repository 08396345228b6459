"""Pure-Python GPD likelihood and simplex kernels.

Mirrors ``_kernels.pyx`` operation for operation; used when the compiled
extension is unavailable or ``MARGSENS_PURE_PYTHON=1`` is set.
"""
import math

import numpy as np

XI_LOWER = -0.9
XI_UPPER = 1.0
XI_ZERO = 1e-8

# standard Nelder-Mead coefficients
_RHO, _CHI, _PSI, _SIGMA = 1.0, 2.0, 0.5, 0.5


def gpd_nll(x, log_sigma, xi):
    """Negative log-likelihood of GPD(exp(log_sigma), xi) at excesses ``x``."""
    if not (math.isfinite(log_sigma) and XI_LOWER < xi < XI_UPPER):
        return math.inf
    x = np.asarray(x, dtype=float)
    sigma = math.exp(log_sigma)
    n = x.shape[0]
    if abs(xi) < XI_ZERO:
        return n * log_sigma + float(np.sum(x)) / sigma
    z = xi * x / sigma
    if np.any(z <= -1.0):
        return math.inf
    val = n * log_sigma + (1.0 + 1.0 / xi) * float(np.sum(np.log1p(z)))
    return val if math.isfinite(val) else math.inf


def gpd_ns_nll(x, design, theta):
    """NLL with ``log sigma_t = design[t] @ theta[:-1]`` and shape ``theta[-1]``."""
    theta = np.asarray(theta, dtype=float)
    xi = theta[-1]
    if not (XI_LOWER < xi < XI_UPPER) or not np.all(np.isfinite(theta)):
        return math.inf
    eta = np.asarray(design, dtype=float) @ theta[:-1]
    if np.any(np.abs(eta) > 700.0):
        return math.inf
    sigma = np.exp(eta)
    x = np.asarray(x, dtype=float)
    if abs(xi) < XI_ZERO:
        return float(np.sum(eta) + np.sum(x / sigma))
    z = xi * x / sigma
    if np.any(z <= -1.0):
        return math.inf
    val = float(np.sum(eta)) + (1.0 + 1.0 / xi) * float(np.sum(np.log1p(z)))
    return val if math.isfinite(val) else math.inf


def nelder_mead(fun, x0, step=0.1, xatol=1e-7, fatol=1e-9, maxiter=4000):
    """Minimise ``fun`` from ``x0``; returns ``(x, fval, n_iter, converged)``."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for k in range(n):
        sim[k + 1] = x0
        sim[k + 1, k] += step
    fsim = np.array([fun(v) for v in sim])
    order = np.argsort(fsim, kind="stable")
    sim, fsim = sim[order], fsim[order]

    it = 0
    converged = False
    while it < maxiter:
        if (
            np.max(np.abs(sim[1:] - sim[0])) <= xatol
            and np.max(np.abs(fsim[1:] - fsim[0])) <= fatol
        ):
            converged = True
            break
        xbar = np.mean(sim[:-1], axis=0)
        xr = (1 + _RHO) * xbar - _RHO * sim[-1]
        fxr = fun(xr)
        shrink = False
        if fxr < fsim[0]:
            xe = (1 + _RHO * _CHI) * xbar - _RHO * _CHI * sim[-1]
            fxe = fun(xe)
            if fxe < fxr:
                sim[-1], fsim[-1] = xe, fxe
            else:
                sim[-1], fsim[-1] = xr, fxr
        elif fxr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fxr
        elif fxr < fsim[-1]:
            xc = (1 + _PSI * _RHO) * xbar - _PSI * _RHO * sim[-1]
            fxc = fun(xc)
            if fxc <= fxr:
                sim[-1], fsim[-1] = xc, fxc
            else:
                shrink = True
        else:
            xcc = (1 - _PSI) * xbar + _PSI * sim[-1]
            fxcc = fun(xcc)
            if fxcc < fsim[-1]:
                sim[-1], fsim[-1] = xcc, fxcc
            else:
                shrink = True
        if shrink:
            for j in range(1, n + 1):
                sim[j] = sim[0] + _SIGMA * (sim[j] - sim[0])
                fsim[j] = fun(sim[j])
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
        it += 1
    return sim[0].copy(), float(fsim[0]), it, converged


def simplex_gpd(x, x0, xatol=1e-7, fatol=1e-9, maxiter=4000):
    x = np.ascontiguousarray(x, dtype=float)
    return nelder_mead(lambda t: gpd_nll(x, t[0], t[1]), x0, 0.1, xatol, fatol, maxiter)


def simplex_gpd_ns(x, design, x0, xatol=1e-7, fatol=1e-9, maxiter=8000):
    x = np.ascontiguousarray(x, dtype=float)
    design = np.ascontiguousarray(design, dtype=float)
    return nelder_mead(lambda t: gpd_ns_nll(x, design, t), x0, 0.1, xatol, fatol, maxiter)


def gpd_quantile_excess(p, sigma, xi):
    if abs(xi) < XI_ZERO:
        return -sigma * math.log1p(-p)
    return sigma / xi * ((1.0 - p) ** (-xi) - 1.0)


def sample_quantile_sorted(xs, p):
    """Linear-interpolation sample quantile of an ascending array."""
    h = (xs.shape[0] - 1) * p
    lo = int(math.floor(h))
    if lo >= xs.shape[0] - 1:
        return float(xs[-1])
    return float(xs[lo] + (h - lo) * (xs[lo + 1] - xs[lo]))


def eqd_bootstrap(sorted_boot, probs, x0, xatol=1e-6, fatol=1e-8, maxiter=2000):
    """Mean quantile discrepancy over bootstrap rows.

    Each row of ``sorted_boot`` is an ascending bootstrap resample of the
    excesses.  A GPD is fitted to every row (warm-started at ``x0``) and the
    mean absolute gap between sample and model quantiles at ``probs`` is
    averaged over rows.  Returns ``(discrepancy, n_failed)``.
    """
    sorted_boot = np.asarray(sorted_boot, dtype=float)
    total = 0.0
    n_ok = 0
    n_fail = 0
    for row in sorted_boot:
        theta, fval, _, _ = simplex_gpd(row, x0, xatol, fatol, maxiter)
        if not math.isfinite(fval):
            n_fail += 1
            continue
        sigma, xi = math.exp(theta[0]), theta[1]
        d = 0.0
        for p in probs:
            d += abs(sample_quantile_sorted(row, p) - gpd_quantile_excess(p, sigma, xi))
        total += d / len(probs)
        n_ok += 1
    if n_ok == 0:
        return math.inf, n_fail
    return total / n_ok, n_fail
