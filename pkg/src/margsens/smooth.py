"""Penalised-spline location-scale pre-whitening.

Each series is modelled as ``y_t = mu(z_t) + sigma(z_t) R_t`` with Gaussian
``R_t``; ``mu`` and ``log sigma`` are additive in a smooth of gmt and a smooth
of day-of-season, both natural cubic regression splines with a
second-derivative penalty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import cho_factor, cho_solve, null_space

from .errors import BasisError, FitFailure

KINDS = ("cubic_regression", "thin_plate_1d")
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-3, 3, 13))


def _ncs_cardinal(knots, x):
    """Design of the natural cubic spline whose coefficients are knot values.

    Linear extrapolation outside the knot range.
    """
    eye = np.eye(len(knots))
    cs = CubicSpline(knots, eye, bc_type="natural")
    x = np.asarray(x, float)
    inside = np.clip(x, knots[0], knots[-1])
    out = cs(inside)
    lo, hi = x < knots[0], x > knots[-1]
    if lo.any():
        out[lo] += (x[lo] - knots[0])[:, None] * cs(knots[0], 1)[None, :]
    if hi.any():
        out[hi] += (x[hi] - knots[-1])[:, None] * cs(knots[-1], 1)[None, :]
    return out


def _ncs_penalty(knots):
    """Integrated squared second derivative, exact for piecewise-linear f''."""
    m = CubicSpline(knots, np.eye(len(knots)), bc_type="natural")(knots, 2)
    h = np.diff(knots)
    a, b = m[:-1], m[1:]
    pen = (a.T * (h / 3)) @ a + (b.T * (h / 3)) @ b + (a.T * (h / 6)) @ b + (b.T * (h / 6)) @ a
    return 0.5 * (pen + pen.T)


@dataclass
class SplineBasis:
    kind: str
    dim: int
    knots: np.ndarray
    design: np.ndarray
    penalty: np.ndarray

    def evaluate(self, x):
        return _ncs_cardinal(self.knots, x)


def build_basis(x, kind: str = "cubic_regression", dim: int = 10) -> SplineBasis:
    """Natural cubic spline basis with knots at quantiles of the distinct values.

    ``thin_plate_1d`` spans the same function space (the one-dimensional
    thin-plate smoother is a natural cubic spline) and shares this
    construction.
    """
    if kind not in KINDS:
        raise BasisError(f"unknown basis kind {kind!r}")
    x = np.asarray(x, float)
    distinct = np.unique(x)
    if dim < 3:
        raise BasisError("basis dimension must be at least 3")
    if dim > len(distinct):
        raise BasisError(f"dimension {dim} exceeds {len(distinct)} distinct covariate values")
    if dim == len(distinct):
        knots = distinct
    else:
        knots = np.quantile(distinct, np.linspace(0, 1, dim))
        if len(np.unique(knots)) < dim:
            raise BasisError("covariate quantiles do not give distinct knots")
    return SplineBasis(kind, dim, knots, _ncs_cardinal(knots, x), _ncs_penalty(knots))


@dataclass
class _Model:
    """Shared design for mu and log sigma: intercept + two centred smooths."""

    X: np.ndarray
    blocks: list  # column slices of the two smooths
    penalties: list  # full-size penalty matrices, one per smooth
    constraints: list  # null-space matrices absorbing the sum-to-zero constraint
    bases: list

    @classmethod
    def build(cls, bases):
        cols = [np.ones((bases[0].design.shape[0], 1))]
        blocks, raw_pen, constraints = [], [], []
        start = 1
        for b in bases:
            Z = null_space(b.design.sum(axis=0)[None, :])
            Xb = b.design @ Z
            Sb = Z.T @ b.penalty @ Z
            # put penalty on the scale of the data cross-product
            Sb *= np.linalg.norm(Xb.T @ Xb) / np.linalg.norm(Sb)
            cols.append(Xb)
            blocks.append(slice(start, start + Xb.shape[1]))
            raw_pen.append(Sb)
            constraints.append(Z)
            start += Xb.shape[1]
        X = np.hstack(cols)
        p = X.shape[1]
        penalties = []
        for sl, Sb in zip(blocks, raw_pen):
            S = np.zeros((p, p))
            S[sl, sl] = Sb
            penalties.append(S)
        return cls(X, blocks, penalties, constraints, bases)

    def penalty(self, lambdas):
        return sum(lam * S for lam, S in zip(lambdas, self.penalties))

    def design_at(self, covariate_values):
        cols = [np.ones((len(covariate_values[0]), 1))]
        for b, Z, v in zip(self.bases, self.constraints, covariate_values):
            cols.append(b.evaluate(v) @ Z)
        return np.hstack(cols)


@dataclass
class TrendFit:
    """Penalised Gaussian location-scale fit of one series."""

    coef_mu: np.ndarray
    coef_logsigma: np.ndarray
    smoothing: dict
    nll: float
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    n_iter: int = 0
    converged: bool = True
    mu_scale: float = 1.0
    knots: dict = field(default_factory=dict)
    _model: _Model | None = field(default=None, repr=False)

    def predict(self, gmt, day_index):
        """``(mu, sigma)`` at new covariate values."""
        X = self._model.design_at([np.asarray(gmt, float), np.asarray(day_index, float)])
        return X @ self.coef_mu, np.exp(X @ self.coef_logsigma)

    def to_dict(self):
        return {
            "coef_mu": [float(c) for c in self.coef_mu],
            "coef_logsigma": [float(c) for c in self.coef_logsigma],
            "smoothing": {k: float(v) for k, v in self.smoothing.items()},
            "knots": {k: [float(x) for x in v] for k, v in self.knots.items()},
            "nll": float(self.nll),
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


def _gcv_search(XtWX, XtWz, zWz, n, penalties, grid, weight=1.0):
    """Grid search of per-term smoothing weights minimising the GCV score."""
    best = (math.inf, None)
    for l1 in grid:
        for l2 in grid:
            H = XtWX + l1 * penalties[0] + l2 * penalties[1]
            try:
                c = cho_factor(H)
            except np.linalg.LinAlgError:
                continue
            beta = cho_solve(c, XtWz)
            rss = zWz - 2 * beta @ XtWz + beta @ XtWX @ beta
            edf = np.trace(cho_solve(c, XtWX))
            score = n * max(rss, 0.0) * weight / (n - edf) ** 2
            if score < best[0]:
                best = (score, (l1, l2))
    if best[1] is None:
        raise FitFailure("no smoothing weights gave a positive definite system")
    return best[1]


def _pen_nll(y, X, beta, gamma, S_mu, S_sig, mu_scale):
    eta = X @ gamma
    r = (y - X @ beta) * np.exp(-eta)
    return float(
        np.sum(eta) + 0.5 * np.sum(r * r) + 0.5 * len(y) * math.log(2 * math.pi)
        + 0.5 * (beta @ S_mu @ beta) / mu_scale
        + 0.5 * (gamma @ S_sig @ gamma)
    )


def _fit_logsigma(e2, X, XtX, gamma, S, max_iter=50, tol=1e-12):
    """Fisher scoring for log sigma given squared residuals."""

    def obj(g):
        eta = X @ g
        return float(np.sum(eta) + 0.5 * np.sum(e2 * np.exp(-2 * eta)) + 0.5 * g @ S @ g)

    f = obj(gamma)
    info = 2.0 * XtX + S
    c = cho_factor(info)
    for _ in range(max_iter):
        eta = X @ gamma
        grad = X.T @ (1.0 - e2 * np.exp(-2 * eta)) + S @ gamma
        step = cho_solve(c, grad)
        t = 1.0
        while True:
            g_new = gamma - t * step
            f_new = obj(g_new)
            if f_new <= f or t < 1e-10:
                break
            t *= 0.5
        done = abs(f - f_new) <= tol * (1.0 + abs(f))
        if f_new <= f:
            gamma, f = g_new, f_new
        if done:
            break
    return gamma


def fit_location_scale(
    series,
    gmt_basis: SplineBasis,
    day_basis: SplineBasis,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    max_iter: int = 100,
    tol: float = 1e-8,
    smoothing: dict | None = None,
) -> TrendFit:
    """Penalised Gaussian maximum likelihood for ``mu(z)`` and ``log sigma(z)``.

    Smoothing weights for ``mu`` come from a GCV grid search with constant
    sigma; weights for ``log sigma`` from GCV on the Fisher-scoring working
    model at a pilot fit.  The two blocks are then updated alternately until
    the relative change in penalised NLL falls below ``tol``.  Passing
    ``smoothing`` (keys ``mu_gmt``, ``mu_day``, ``sigma_gmt``, ``sigma_day``)
    fixes the weights and skips the search.
    """
    y = np.asarray(series, float)
    if not np.all(np.isfinite(y)):
        raise FitFailure("series contains non-finite values")
    model = _Model.build([gmt_basis, day_basis])
    X = model.X
    n, p = X.shape
    grid = np.asarray(lambda_grid, float)
    XtX = X.T @ X

    # mu smoothing: unweighted GCV
    if smoothing is not None:
        lam_mu = (float(smoothing["mu_gmt"]), float(smoothing["mu_day"]))
    else:
        lam_mu = _gcv_search(XtX, X.T @ y, y @ y, n, model.penalties, grid)
    S_mu = model.penalty(lam_mu)
    beta = cho_solve(cho_factor(XtX + S_mu), X.T @ y)
    resid = y - X @ beta
    mu_scale = float(resid @ resid) / n
    if not mu_scale > 0:
        raise FitFailure("series is exactly reproduced by the mean model")

    # log sigma smoothing: GCV on the working model of a pilot fit
    gamma = np.zeros(p)
    gamma[0] = 0.5 * math.log(mu_scale)
    e2 = resid**2
    gamma = _fit_logsigma(e2, X, XtX, gamma, model.penalty((1.0, 1.0)))
    eta = X @ gamma
    z = eta + 0.5 * (e2 * np.exp(-2 * eta) - 1.0)
    Wz = 2.0 * z
    if smoothing is not None:
        lam_sig = (float(smoothing["sigma_gmt"]), float(smoothing["sigma_day"]))
    else:
        lam_sig = _gcv_search(2.0 * XtX, X.T @ Wz, z @ Wz, n, model.penalties, grid)
    S_sig = model.penalty(lam_sig)

    # alternate from the constant-mean / constant-sd fit
    beta = np.zeros(p)
    beta[0] = y.mean()
    gamma = np.zeros(p)
    gamma[0] = math.log(y.std())
    f = _pen_nll(y, X, beta, gamma, S_mu, S_sig, mu_scale)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = np.exp(-2 * X @ gamma)
        XtWX = X.T @ (w[:, None] * X)
        beta = cho_solve(cho_factor(XtWX + S_mu / mu_scale), X.T @ (w * y))
        e2 = (y - X @ beta) ** 2
        gamma = _fit_logsigma(e2, X, XtX, gamma, S_sig)
        f_new = _pen_nll(y, X, beta, gamma, S_mu, S_sig, mu_scale)
        rel = abs(f - f_new) / max(abs(f_new), 1e-300)
        f = f_new
        if rel < tol:
            converged = True
            break
    if not math.isfinite(f):
        raise FitFailure("location-scale likelihood diverged")
    return TrendFit(
        coef_mu=beta,
        coef_logsigma=gamma,
        smoothing={
            "mu_gmt": lam_mu[0], "mu_day": lam_mu[1],
            "sigma_gmt": lam_sig[0], "sigma_day": lam_sig[1],
        },
        nll=f,
        mu_hat=X @ beta,
        sigma_hat=np.exp(X @ gamma),
        n_iter=it,
        converged=converged,
        mu_scale=mu_scale,
        knots={"gmt": gmt_basis.knots, "day": day_basis.knots},
        _model=model,
    )


def penalized_nll(series, fit: TrendFit, coef_mu=None, coef_logsigma=None):
    """Penalised NLL of ``series`` at the given (default: fitted) coefficients."""
    m = fit._model
    S_mu = m.penalty((fit.smoothing["mu_gmt"], fit.smoothing["mu_day"]))
    S_sig = m.penalty((fit.smoothing["sigma_gmt"], fit.smoothing["sigma_day"]))
    beta = fit.coef_mu if coef_mu is None else np.asarray(coef_mu, float)
    gamma = fit.coef_logsigma if coef_logsigma is None else np.asarray(coef_logsigma, float)
    return _pen_nll(np.asarray(series, float), m.X, beta, gamma, S_mu, S_sig, fit.mu_scale)


def fit_site_trend(series, covariates, gmt_dim: int = 10, day_dim: int = 92, **kw) -> TrendFit:
    """Build default bases from a covariate table and fit one series."""
    gb, db = default_bases(covariates, gmt_dim, day_dim)
    return fit_location_scale(series, gb, db, **kw)


def default_bases(covariates, gmt_dim: int = 10, day_dim: int = 92):
    """Thin-plate gmt smooth and cubic regression day smooth, dims capped by the data."""
    n_gmt = len(np.unique(covariates.gmt))
    n_day = len(np.unique(covariates.day_index))
    gb = build_basis(covariates.gmt, "thin_plate_1d", min(gmt_dim, n_gmt))
    db = build_basis(covariates.day_index, "cubic_regression", min(day_dim, n_day))
    return gb, db


def residuals(series, fit: TrendFit):
    """Standardised residuals ``(y - mu) / sigma``."""
    return (np.asarray(series, float) - fit.mu_hat) / fit.sigma_hat
