"""Synthetic fields with known truth, and brute-force oracles.

The oracles deliberately avoid the package's own numerics: Gaussian tail
probabilities come from direct quadrature, and the dense CSE likelihood is
assembled from ``scipy.stats`` distributions and explicit Gaussian
conditioning.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate, stats

from .data import CovariateTable, SiteSet, SpatioTemporalField
from .errors import OracleError


@dataclass(frozen=True)
class SyntheticSpec:
    """Generative description of a raw field.

    ``y = mu + sigma * (eps + gamma_year)`` with ``mu = mu0 + gmt_slope * gmt
    + seasonal_amplitude * sin(pi d / (L + 1))`` and
    ``sigma = sigma0 * exp(log_sigma_gmt_slope * gmt)``.  ``eps`` is a
    Gaussian field with powered-exponential correlation
    ``exp(-(h / corr_range) ** corr_shape)`` (independent when
    ``corr_range == 0``), iid over time.  ``gamma_year`` is common to all
    sites; its sd may be a scalar or a ``(first, last)`` pair interpolated
    linearly across years.  ``gmt`` is a yearly ramp over ``gmt_range`` plus
    optional iid daily noise with sd ``gmt_daily_sd``, which acts as a
    within-year signal shared by all sites.
    """

    nx: int = 5
    ny: int = 5
    spacing: float = 1.0
    n_years: int = 31
    season_length: int = 92
    start_year: int = 1985
    gmt_range: tuple = (0.0, 0.3)
    gmt_daily_sd: float = 0.0
    mu0: float = 0.0
    gmt_slope: float = 0.0
    seasonal_amplitude: float = 0.0
    sigma0: float = 1.0
    log_sigma_gmt_slope: float = 0.0
    year_effect_sd: float | tuple = 0.0
    corr_range: float = 0.0
    corr_shape: float = 1.0
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticField:
    field: SpatioTemporalField
    covariates: CovariateTable
    mu: np.ndarray
    sigma: np.ndarray
    year_effects: np.ndarray
    noise: np.ndarray  # standard-normal copula field, D x T
    spec: SyntheticSpec

    @property
    def true_uniform(self) -> np.ndarray:
        return stats.norm.cdf(self.noise)


def season_dates(start_year, n_years, season_length=92, month=6):
    return np.concatenate(
        [np.datetime64(f"{start_year + k:04d}-{month:02d}-01") + np.arange(season_length) for k in range(n_years)]
    )


def powered_exponential(h, corr_range, shape):
    h = np.asarray(h, float)
    if corr_range == 0:
        return (h == 0).astype(float)
    return np.exp(-((h / corr_range) ** shape))


def gaussian_field(sites: SiteSet, n_times, corr_range, shape, rng) -> np.ndarray:
    """``D x n_times`` standard normal draws with spatial correlation, iid in time."""
    D = len(sites)
    z = rng.standard_normal((D, n_times))
    if corr_range == 0:
        return z
    C = powered_exponential(sites.distances(), corr_range, shape)
    L = np.linalg.cholesky(C + 1e-12 * np.eye(D))
    return L @ z


def gen_field(spec: SyntheticSpec) -> SyntheticField:
    """Draw a raw-scale field from ``spec``; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    sites = SiteSet.grid(spec.nx, spec.ny, spec.spacing)
    L = spec.season_length
    dates = season_dates(spec.start_year, spec.n_years, L)
    gmt = np.repeat(np.linspace(spec.gmt_range[0], spec.gmt_range[1], spec.n_years), L)
    noise = gaussian_field(sites, len(dates), spec.corr_range, spec.corr_shape, rng)
    sd = spec.year_effect_sd
    if np.ndim(sd) == 0:
        sd_k = np.full(spec.n_years, float(sd))
    else:
        sd_k = np.linspace(float(sd[0]), float(sd[1]), spec.n_years)
    gamma = sd_k * rng.standard_normal(spec.n_years)
    gamma_t = np.repeat(gamma, L)
    if spec.gmt_daily_sd > 0:
        # drawn last so that fields without daily gmt noise are unchanged
        gmt = gmt + spec.gmt_daily_sd * rng.standard_normal(len(dates))
    cov = CovariateTable.from_dates(dates, gmt)
    day = cov.day_index.astype(float)
    mu = spec.mu0 + spec.gmt_slope * gmt + spec.seasonal_amplitude * np.sin(np.pi * day / (L + 1))
    sigma = spec.sigma0 * np.exp(spec.log_sigma_gmt_slope * gmt)
    values = mu[None, :] + sigma[None, :] * (noise + gamma_t[None, :])
    fld = SpatioTemporalField(sites, dates, values, "raw")
    D = len(sites)
    return SyntheticField(
        fld, cov, np.broadcast_to(mu, (D, len(dates))).copy(),
        np.broadcast_to(sigma, (D, len(dates))).copy(), gamma, noise, spec,
    )


# --- Gaussian copula oracles ---------------------------------------------------


def _joint_upper_dblquad(rho, z):
    s = math.sqrt(1.0 - rho * rho)
    c = 1.0 / (2.0 * math.pi * s)

    def dens(y, x):
        return c * math.exp(-(x * x - 2 * rho * x * y + y * y) / (2 * s * s))

    hi = z + 40.0
    val, err = integrate.dblquad(dens, z, hi, z, hi, epsabs=1e-13, epsrel=1e-11)
    return val, err


def _joint_upper_plackett(rho, z):
    # d/dr P(X > z, Y > z) equals the bivariate density at (z, z)
    pz = 0.5 * math.erfc(z / math.sqrt(2.0))

    def dens(r):
        return math.exp(-z * z / (1.0 + r)) / (2.0 * math.pi * math.sqrt(1.0 - r * r))

    val, err = integrate.quad(dens, 0.0, rho, epsabs=1e-14, epsrel=1e-12, limit=200)
    return pz * pz + val, err


def gaussian_joint_upper(rho, u, method="dblquad"):
    """``P(U > u, V > u)`` for a Gaussian copula with correlation ``rho``."""
    if not (-1 < rho < 1):
        raise OracleError("correlation must lie in (-1, 1)")
    if not (0 < u < 1):
        raise OracleError("u must lie in (0, 1)")
    z = stats.norm.isf(1.0 - u)
    if method == "dblquad":
        val, err = _joint_upper_dblquad(rho, z)
    elif method == "plackett":
        val, err = _joint_upper_plackett(rho, z)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not math.isfinite(val) or err > 1e-8:
        raise OracleError(f"quadrature did not converge (error estimate {err:.2e})")
    return val


def oracle_chi_gaussian(rho, u, method="dblquad"):
    """Exact ``chi_u`` of a bivariate Gaussian copula."""
    return gaussian_joint_upper(rho, u, method) / (1.0 - u)


def oracle_eta_gaussian(rho):
    """Limit ``eta = (1 + rho) / 2`` of a Gaussian copula."""
    if not (-1 < rho <= 1):
        raise OracleError("correlation must lie in (-1, 1]")
    return 0.5 * (1.0 + rho)


def oracle_eta_gaussian_u(rho, u, method="plackett"):
    """Finite-level ``eta_u = log(1 - u) / log P(U > u, V > u)``."""
    return math.log1p(-u) / math.log(gaussian_joint_upper(rho, u, method))


# --- dense CSE likelihood oracle ----------------------------------------------


def oracle_nll_dense(params, coords, exceedances):
    """Brute-force composite NLL of the conditional spatial extremes model.

    ``exceedances`` is a list of ``(s0_index, remote_indices, y0, Y)`` with
    ``y0`` the conditioning values (length n) and ``Y`` the remote values
    (n x m).  Every term is built from first principles: the full Gaussian
    covariance over all sites, explicit conditioning on ``Z(s0) = 0``,
    generalised-normal margins and ``scipy.stats.multivariate_normal``.
    """
    p = params
    coords = np.asarray(coords, float)
    total = 0.0
    for s0, remote, y0, Y in exceedances:
        remote = np.asarray(remote)
        h_all = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        full_cov = p.sigma_Z**2 * np.exp(-((h_all / p.phi_Z) ** p.nu_Z))
        idx = np.r_[s0, remote]
        sub = full_cov[np.ix_(idx, idx)]
        c00, c0r, crr = sub[0, 0], sub[0, 1:], sub[1:, 1:]
        cond_cov = crr - np.outer(c0r, c0r) / c00
        rho0 = c0r / c00
        mean = p.mu_Z * (1.0 - rho0)
        var = np.diag(cond_cov)
        corr = cond_cov / np.sqrt(np.outer(var, var))
        scale = np.sqrt(var * math.gamma(1.0 / p.delta_dl) / math.gamma(3.0 / p.delta_dl))
        h = h_all[s0, remote]
        excess = np.maximum(h - p.delta_ad, 0.0)
        alpha = np.where(h <= p.delta_ad, 1.0, np.exp(-(excess**p.kappa) / p.lambda_a))
        mvn = stats.multivariate_normal(mean=np.zeros(len(remote)), cov=corr)
        for y, row in zip(np.atleast_1d(y0), np.atleast_2d(Y)):
            a = alpha * y
            b = 1.0 + (alpha * y) ** p.beta
            z = (row - a) / b
            marg = stats.gennorm(p.delta_dl, loc=mean, scale=scale)
            q = stats.norm.ppf(marg.cdf(z))
            log_dens = (
                mvn.logpdf(q) - np.sum(stats.norm.logpdf(q)) + np.sum(marg.logpdf(z)) - np.sum(np.log(b))
            )
            total -= log_dens
    return float(total)
