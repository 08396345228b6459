"""Conditional spatial extremes model.

Given an exceedance ``Y(s0) = y > t`` on standard Laplace margins,

    Y(s) = alpha(h) y + b(y, h) Z0(s),   h = ||s - s0||,

with ``alpha(h) = exp(-(h - Delta)^kappa / lambda)`` beyond the radius
``Delta`` (1 inside it), ``b = 1 + (y alpha)^beta`` and a residual process
``Z0`` whose dependence is that of a Gaussian process with correlation
``rho(h) = exp(-(h / phi_Z)^nu_Z)`` conditioned on ``Z(s0) = 0``.  The margins
of ``Z0`` are delta-Laplace with the conditioned Gaussian's mean and
variance; they are joined by the conditioned correlation through a Gaussian
copula.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import gammainccinv, gammaincc, gammaln, log_ndtr, ndtr, ndtri, ndtri_exp

from .errors import CovarianceError, FitFailure
from .gpd import to_laplace

TABLE1_COLUMNS = ("kappa", "lambda_a", "beta", "phi_Z", "mu_Z", "delta_dl", "nu_Z", "sigma_Z")
KAPPA_BOX = (0.01, 2.0)
NU_BOX = (0.01, 2.0)
BETA_MIN = 1e-3
TINY = 1e-300  # tail probabilities below this are handled on the log scale
MU_BOX = (-1e4, 1e4)
PENALTY = 1e12
JITTER = 1e-10
N_JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class CseParams:
    kappa: float
    lambda_a: float
    beta: float
    phi_Z: float
    mu_Z: float
    delta_dl: float
    nu_Z: float
    sigma_Z: float
    delta_ad: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.kappa <= 2.0):
            raise ValueError("kappa must lie in (0, 2]")
        for name in ("lambda_a", "beta", "phi_Z", "delta_dl", "nu_Z", "sigma_Z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (MU_BOX[0] < self.mu_Z < MU_BOX[1]):
            raise ValueError("mu_Z outside its box")
        if not self.delta_ad >= 0:
            raise ValueError("delta_ad must be non-negative")

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}

    def table_row(self):
        return [float(getattr(self, k)) for k in TABLE1_COLUMNS]


# --- kernels -------------------------------------------------------------------


def alpha_fn(h, params: CseParams):
    """Conditional slope: 1 within ``delta_ad``, powered-exponential decay beyond."""
    h = np.asarray(h, float)
    if np.any(h < 0):
        raise ValueError("distances must be non-negative")
    excess = np.maximum(h - params.delta_ad, 0.0)
    out = np.where(h <= params.delta_ad, 1.0, np.exp(-(excess**params.kappa) / params.lambda_a))
    return out if out.ndim else float(out)


def b_fn(y, h, params: CseParams):
    """Scale function ``1 + (y alpha(h))^beta``."""
    y = np.asarray(y, float)
    out = 1.0 + (y * alpha_fn(h, params)) ** params.beta
    return out if np.ndim(out) else float(out)


def residual_corr(h, params: CseParams):
    return np.exp(-((np.asarray(h, float) / params.phi_Z) ** params.nu_Z))


# --- delta-Laplace ---------------------------------------------------------------


def dl_scale(var, delta):
    """Delta-Laplace scale whose variance equals ``var``."""
    return np.sqrt(np.asarray(var, float) * math.exp(gammaln(1.0 / delta) - gammaln(3.0 / delta)))


def dl_logpdf(z, mu, sigma, delta):
    w = np.abs((np.asarray(z, float) - mu) / sigma)
    return math.log(delta) - math.log(2.0) - np.log(sigma) - gammaln(1.0 / delta) - w**delta


def dl_pdf(z, mu, sigma, delta):
    return np.exp(dl_logpdf(z, mu, sigma, delta))


def _log_upper_gamma(a, x):
    """``log Q(a, x)``, switching to the large-``x`` expansion where ``Q`` underflows."""
    x = np.asarray(x, float)
    q = gammaincc(a, x)
    with np.errstate(divide="ignore"):
        out = np.log(q)
    far = q < TINY
    if np.any(far):
        xf = x[far]
        series = 1.0 + (a - 1.0) / xf * (1.0 + (a - 2.0) / xf * (1.0 + (a - 3.0) / xf * (1.0 + (a - 4.0) / xf)))
        out[far] = (a - 1.0) * np.log(xf) - xf - gammaln(a) + np.log(series)
    return out


def _inv_log_upper_gamma(a, log_q):
    """Solve ``log Q(a, x) = log_q`` for ``x`` by Newton steps from ``x = -log_q``."""
    x = -np.asarray(log_q, float)
    for _ in range(8):
        f = _log_upper_gamma(a, x) - log_q
        slope = -np.exp((a - 1.0) * np.log(x) - x - gammaln(a) - _log_upper_gamma(a, x))
        x = np.maximum(x - f / slope, 0.5 * x)
    return x


def dl_normal_score(z, mu, sigma, delta):
    """``Phi^{-1}(F_dl(z))`` computed from the smaller tail for accuracy."""
    w = (np.asarray(z, float) - mu) / sigma
    x = np.atleast_1d(np.abs(w) ** delta)
    tail = 0.5 * gammaincc(1.0 / delta, x)
    score = -ndtri(tail)
    far = tail < TINY
    if np.any(far):
        score[far] = -ndtri_exp(math.log(0.5) + _log_upper_gamma(1.0 / delta, x[far]))
    return np.sign(w) * score.reshape(np.shape(w))


def dl_cdf(z, mu, sigma, delta):
    w = (np.asarray(z, float) - mu) / sigma
    tail = 0.5 * gammaincc(1.0 / delta, np.abs(w) ** delta)
    return np.where(w >= 0, 1.0 - tail, tail)


def _dl_from_tail(tail, sign, mu, sigma, delta):
    return mu + sigma * sign * gammainccinv(1.0 / delta, 2.0 * tail) ** (1.0 / delta)


def dl_quantile(p, mu, sigma, delta):
    p = np.asarray(p, float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    tail = np.minimum(p, 1.0 - p)
    return _dl_from_tail(tail, np.sign(p - 0.5), mu, sigma, delta)


def dl_from_normal_score(q, mu, sigma, delta):
    """Inverse of ``dl_normal_score``."""
    q = np.asarray(q, float)
    tail = ndtr(-np.abs(q))
    far = tail < TINY
    if not np.any(far):
        return _dl_from_tail(tail, np.sign(q), mu, sigma, delta)
    x = np.atleast_1d(np.where(far, 1.0, gammainccinv(1.0 / delta, 2.0 * tail)))
    qf = np.atleast_1d(q)[np.atleast_1d(far)]
    x[np.atleast_1d(far)] = _inv_log_upper_gamma(1.0 / delta, log_ndtr(-np.abs(qf)) + math.log(2.0))
    return mu + sigma * np.sign(q) * x.reshape(np.shape(q)) ** (1.0 / delta)


# --- residual law ------------------------------------------------------------------


def _cholesky_jitter(R):
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(R.shape[-1])
    jitter = JITTER
    for _ in range(N_JITTER_ESCALATIONS):
        try:
            return np.linalg.cholesky(R + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CovarianceError("conditioned correlation matrix is not positive definite")


@dataclass
class ResidualLaw:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    corr: np.ndarray
    chol: np.ndarray
    delta: float


def residual_law(h0, h_remote, params: CseParams) -> ResidualLaw:
    """Margins and copula correlation of ``Z0`` at the remote sites.

    ``h0`` holds distances from ``s0``; ``h_remote`` the pairwise distances
    among remote sites.  A remote site at distance 0 is degenerate at 0.
    """
    h0 = np.asarray(h0, float)
    rho0 = residual_corr(h0, params)
    P = residual_corr(h_remote, params)
    mean = params.mu_Z * (1.0 - rho0)
    one_minus = 1.0 - rho0**2
    var = params.sigma_Z**2 * one_minus
    if np.any(one_minus <= 0):
        raise CovarianceError("a remote site coincides with the conditioning site")
    cond = P - np.outer(rho0, rho0)
    sd = np.sqrt(one_minus)
    corr = cond / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    chol = _cholesky_jitter(corr)
    return ResidualLaw(mean, var, dl_scale(var, params.delta_dl), corr, chol, params.delta_dl)


# --- exceedance data ------------------------------------------------------------------


@dataclass
class ExceedanceSet:
    """Exceedance times at one conditioning site, restricted to its remote set."""

    s0: int
    remote: np.ndarray
    y0: np.ndarray
    Y: np.ndarray
    h0: np.ndarray
    h_remote: np.ndarray


@dataclass
class CseData:
    sets: list
    coords: np.ndarray
    site_ids: np.ndarray
    threshold_q: float
    threshold_t: float
    remote_subsample: int | None
    seed: int

    @property
    def n_exceedances(self):
        return int(sum(len(s.y0) for s in self.sets))

    @classmethod
    def from_samples(cls, coords, site_ids, samples, threshold_q, remote_subsample=None, seed=0):
        """Build from ``(s0_index, y0, Y_all_sites)`` triples grouped per site."""
        coords = np.asarray(coords, float)
        dist = _distances(coords)
        D = len(coords)
        sets = []
        for s0, y0, Y in samples:
            remote = _remote_subset(D, s0, remote_subsample, seed, site_ids[s0])
            Y = np.atleast_2d(np.asarray(Y, float))
            sets.append(
                ExceedanceSet(int(s0), remote, np.asarray(y0, float), Y[:, remote],
                              dist[s0, remote], dist[np.ix_(remote, remote)])
            )
        return cls(sets, coords, np.asarray(site_ids), threshold_q, to_laplace(threshold_q),
                   remote_subsample, seed)


def _distances(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def _remote_subset(D, s0, remote_subsample, seed, site_id):
    others = np.delete(np.arange(D), s0)
    if remote_subsample is None or remote_subsample >= len(others):
        return others
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(site_id)]))
    return np.sort(rng.choice(others, size=remote_subsample, replace=False))


def exceedance_data(obj, threshold_q=0.95, conditioning_sites=None, remote_subsample=50, seed=0) -> CseData:
    """Collect per-conditioning-site exceedances of ``F_L^{-1}(threshold_q)``.

    ``obj`` is a Laplace-scale field or a DetrendedField; ``conditioning_sites``
    lists site ids (default: all sites).  Remote sets are seeded subsamples
    that depend only on ``(seed, site id)``.
    """
    fld = getattr(obj, "laplace", obj)
    if fld.scale != "laplace":
        raise ValueError("the CSE model needs a Laplace-scale field")
    ids = fld.sites.ids
    if conditioning_sites is None:
        cond = np.arange(len(ids))
    else:
        pos = {int(s): i for i, s in enumerate(ids)}
        try:
            cond = np.array([pos[int(s)] for s in conditioning_sites])
        except KeyError as err:
            raise ValueError(f"unknown conditioning site {err.args[0]}") from None
    t = to_laplace(threshold_q)
    samples = []
    for s0 in cond:
        mask = fld.values[s0] > t
        samples.append((s0, fld.values[s0, mask], fld.values[:, mask].T))
    return CseData.from_samples(fld.sites.coords, ids, samples, threshold_q, remote_subsample, seed)


# --- composite likelihood ---------------------------------------------------------------


def _set_loglik(es: ExceedanceSet, p: CseParams):
    if len(es.y0) == 0:
        return 0.0
    law = residual_law(es.h0, es.h_remote, p)
    alpha = alpha_fn(es.h0, p)
    ya = es.y0[:, None] * alpha[None, :]
    b = 1.0 + ya**p.beta
    z = (es.Y - ya) / b
    q = dl_normal_score(z, law.mean, law.scale, p.delta_dl)
    marg = dl_logpdf(z, law.mean, law.scale, p.delta_dl)
    v = solve_triangular(law.chol, q.T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(law.chol)))
    n = len(es.y0)
    copula = -0.5 * (np.sum(v * v) - np.sum(q * q)) - 0.5 * n * logdet
    return copula + np.sum(marg) - np.sum(np.log(b))


def composite_nll(params: CseParams, data, threshold_q=0.95, conditioning_sites=None,
                  remote_subsample=50, seed=0) -> float:
    """Negative composite log-likelihood summed over conditioning sites.

    ``data`` is a ``CseData`` or a Laplace field (then the remaining arguments
    select exceedances).  Raises CovarianceError when the conditioned
    correlation cannot be factorised; a non-finite total returns ``1e12``.
    """
    if not isinstance(data, CseData):
        data = exceedance_data(data, threshold_q, conditioning_sites, remote_subsample, seed)
    total = 0.0
    with np.errstate(all="ignore"):
        for es in data.sets:
            total += _set_loglik(es, params)
    return -total if math.isfinite(total) else PENALTY


# --- fitting -----------------------------------------------------------------------


@dataclass(frozen=True)
class CseConfig:
    conditioning_sites: tuple | None = None
    remote_subsample: int | None = 50
    seed: int = 0
    n_starts: int = 3
    beta_max: float = 1.0
    fit_delta_ad: bool = False
    delta_ad: float = 0.0
    maxiter: int = 1000
    tol: float = 1e-8
    polish_fev: int = 400
    max_cycles: int = 3


class _Transform:
    """Map between optimizer vectors and CseParams.

    Box parameters (kappa, beta, nu_Z, Delta) stay on their natural scale and
    are handled as optimizer bounds; the other positive parameters are
    log-transformed.  When ``phi_Z`` is large relative to the site spacing
    the likelihood mostly sees ``mu_Z (h / phi_Z)^nu_Z`` and
    ``sigma_Z^2 (h / phi_Z)^nu_Z``, so ``mu_Z`` and ``log sigma_Z`` are
    rescaled by ``(phi_Z / h_ref)^nu_Z`` to flatten that ridge.
    """

    def __init__(self, h_ref, beta_max=1.0, fit_delta_ad=False, delta_ad=0.0, delta_max=None):
        self.h_ref = float(h_ref)
        self.fit_delta_ad = fit_delta_ad
        self.delta_ad = delta_ad
        self.bounds = [KAPPA_BOX, (None, None), (BETA_MIN, beta_max), (None, None),
                       (None, None), (None, None), NU_BOX, (None, None)]
        if fit_delta_ad:
            self.bounds.append((0.0, delta_max if delta_max is not None else 10.0 * self.h_ref))

    def to_params(self, x):
        k, lam, beta, lphi, m, ldl, nu, v = x[:8]
        r = lphi - math.log(self.h_ref)
        return CseParams(
            kappa=float(k), lambda_a=math.exp(lam), beta=float(beta), phi_Z=math.exp(lphi),
            mu_Z=float(m) * math.exp(nu * r), delta_dl=math.exp(ldl), nu_Z=float(nu),
            sigma_Z=math.exp(v + 0.5 * nu * r),
            delta_ad=float(x[8]) if self.fit_delta_ad else self.delta_ad,
        )

    def to_vector(self, p: CseParams):
        r = math.log(p.phi_Z) - math.log(self.h_ref)
        x = [p.kappa, math.log(p.lambda_a), p.beta, math.log(p.phi_Z), p.mu_Z * math.exp(-p.nu_Z * r),
             math.log(p.delta_dl), p.nu_Z, math.log(p.sigma_Z) - 0.5 * p.nu_Z * r]
        if self.fit_delta_ad:
            x.append(p.delta_ad)
        return self.clip(np.array(x, float))

    def clip(self, x):
        lo = np.array([-np.inf if b[0] is None else b[0] for b in self.bounds])
        hi = np.array([np.inf if b[1] is None else b[1] for b in self.bounds])
        return np.clip(x, lo, hi)


@dataclass
class CseFit:
    params: CseParams
    threshold_q: float
    threshold_t: float
    conditioning_sites: list
    remote_subsample: int | None
    seed: int
    nll: float
    converged: bool
    n_exceedances: int
    coords: np.ndarray
    site_ids: np.ndarray
    identifiable: bool = True
    notes: list = field(default_factory=list)
    starts: list = field(default_factory=list)

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "threshold_q": self.threshold_q,
            "threshold_t": self.threshold_t,
            "conditioning_sites": [int(s) for s in self.conditioning_sites],
            "remote_subsample": self.remote_subsample,
            "seed": self.seed,
            "nll": self.nll,
            "converged": self.converged,
            "n_exceedances": self.n_exceedances,
            "identifiable": self.identifiable,
            "notes": list(self.notes),
            "starts": self.starts,
            "site_ids": [int(s) for s in self.site_ids],
            "coords": [[float(c) for c in row] for row in self.coords],
        }

    @classmethod
    def from_dict(cls, d):
        """Rebuild a fit written by ``to_dict``."""
        return cls(
            CseParams(**d["params"]), d["threshold_q"], d["threshold_t"],
            list(d["conditioning_sites"]), d["remote_subsample"], d["seed"], d["nll"],
            d["converged"], d["n_exceedances"], np.asarray(d["coords"], float),
            np.asarray(d["site_ids"]), d.get("identifiable", True), list(d.get("notes", [])),
            list(d.get("starts", [])),
        )


def _distance_scales(data: CseData):
    """Median pairwise and median nearest-neighbour distances."""
    h = _distances(data.coords)
    eye = np.eye(len(h), dtype=bool)
    h_med = float(np.median(h[~eye])) if len(h) > 1 else 1.0
    h_nn = float(np.median(np.where(eye, np.inf, h).min(axis=1))) if len(h) > 1 else 1.0
    return max(h_med, 1e-3), max(h_nn, 1e-3)


def default_start(data: CseData) -> CseParams:
    """Data-scaled starting values."""
    h_med, h_nn = _distance_scales(data)
    return CseParams(
        kappa=1.0, lambda_a=h_nn, beta=0.5, phi_Z=h_med, mu_Z=0.0,
        delta_dl=1.0, nu_Z=1.0, sigma_Z=1.0,
    )


def _alpha_is_flat(params, data, tol=1e-3):
    h = np.concatenate([s.h0 for s in data.sets]) if data.sets else np.array([0.0])
    a = alpha_fn(h, params)
    return float(np.ptp(a)) < tol


def fit_cse(obj, threshold_q: float = 0.95, config: CseConfig | None = None, start: CseParams | None = None) -> CseFit:
    """Composite maximum likelihood in transformed coordinates.

    Each start (``start`` or a data-scaled default, then seeded perturbations
    of it) is optimized by L-BFGS-B with central-difference gradients.  The
    best optimum is then checked by a short bounded simplex run; if the
    simplex still improves the NLL by more than ``tol`` (relative), the
    gradient run is repeated from there, up to ``max_cycles`` times.
    ``converged`` records whether the last cycle met that tolerance.
    """
    cfg = config or CseConfig()
    if isinstance(obj, CseData):
        data = obj
    else:
        data = exceedance_data(obj, threshold_q, cfg.conditioning_sites, cfg.remote_subsample, cfg.seed)
    if data.n_exceedances == 0:
        raise FitFailure("no exceedances of the conditioning threshold")
    h_ref, _ = _distance_scales(data)
    tr = _Transform(h_ref, cfg.beta_max, cfg.fit_delta_ad, cfg.delta_ad)
    p0 = start or replace(default_start(data), delta_ad=cfg.delta_ad)

    def objective(x):
        try:
            p = tr.to_params(x)
        except (ValueError, OverflowError):
            return PENALTY
        if not (MU_BOX[0] < p.mu_Z < MU_BOX[1]):
            return PENALTY
        try:
            return composite_nll(p, data)
        except CovarianceError:
            return PENALTY

    def gradient_run(x):
        res = minimize(objective, x, method="L-BFGS-B", jac="3-point", bounds=tr.bounds,
                       options={"maxiter": cfg.maxiter, "ftol": cfg.tol * 1e-3, "gtol": 1e-7})
        return float(res.fun), res.x

    x0 = tr.to_vector(p0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    starts = [x0] + [tr.clip(x0 + rng.normal(0.0, 0.5, len(x0))) for _ in range(max(cfg.n_starts, 1) - 1)]
    runs = []
    for s in starts:
        if not objective(s) < PENALTY:
            runs.append((PENALTY, s))
            continue
        runs.append(gradient_run(s))
    fun, x = min(runs, key=lambda r: r[0])
    if not fun < PENALTY:
        raise FitFailure("every CSE start failed to produce a finite likelihood")
    ok = cfg.polish_fev <= 0
    for _ in range(max(cfg.max_cycles, 1)):
        if cfg.polish_fev <= 0:
            break
        res = minimize(objective, x, method="Nelder-Mead", bounds=tr.bounds,
                       options={"maxfev": cfg.polish_fev, "xatol": 1e-6,
                                "fatol": cfg.tol * max(abs(fun), 1.0), "adaptive": True})
        gain = fun - float(res.fun)
        if gain <= cfg.tol * max(abs(fun), 1.0):
            ok = True
            break
        fun, x = gradient_run(res.x)
    params = tr.to_params(x)
    notes = []
    if not ok:
        notes.append("simplex check still improving after the last cycle")
    identifiable = not _alpha_is_flat(params, data)
    if not identifiable:
        msg = "alpha is flat over the observed distances; kappa and lambda_a are not identifiable"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    cond_ids = [int(data.site_ids[s.s0]) for s in data.sets]
    return CseFit(
        params, data.threshold_q, float(data.threshold_t), cond_ids, data.remote_subsample,
        data.seed, float(fun), bool(ok), data.n_exceedances, data.coords,
        data.site_ids, identifiable, notes, [{"nll": float(r[0])} for r in runs],
    )


# --- simulation ---------------------------------------------------------------------


@dataclass
class SimulatedFields:
    s0: np.ndarray  # conditioning site index per field
    y0: np.ndarray
    values: np.ndarray  # n_fields x D, Laplace scale
    coords: np.ndarray
    threshold_t: float

    def residuals(self, params: CseParams):
        """``(Y - a) / b`` at every site (0 at the conditioning site)."""
        dist = _distances(self.coords)
        h = dist[self.s0]
        alpha = alpha_fn(h, params)
        ya = self.y0[:, None] * alpha
        return (self.values - ya) / (1.0 + ya**params.beta)


def simulate_cse(fit_or_params, coords=None, s0_policy="uniform", n_fields=1000, seed=0,
                 threshold_t=None, conditioning_sites=None) -> SimulatedFields:
    """Draw fields from the model given an exceedance at ``s0``.

    ``s0_policy`` is ``"uniform"`` over the conditioning set or a site index.
    ``Y(s0) = t + E`` with ``E`` standard exponential, which is exact for
    standard Laplace margins above ``t > 0``.
    """
    if isinstance(fit_or_params, CseFit):
        fit = fit_or_params
        params = fit.params
        coords = fit.coords if coords is None else coords
        threshold_t = fit.threshold_t if threshold_t is None else threshold_t
        if conditioning_sites is None:
            pos = {int(s): i for i, s in enumerate(fit.site_ids)}
            conditioning_sites = [pos[s] for s in fit.conditioning_sites]
    else:
        params = fit_or_params
        if coords is None or threshold_t is None:
            raise ValueError("coords and threshold_t are required with bare parameters")
    coords = np.asarray(coords, float)
    D = len(coords)
    if threshold_t <= 0:
        raise ValueError("the conditioning threshold must be positive on the Laplace scale")
    dist = _distances(coords)
    rng = np.random.default_rng(seed)
    if isinstance(s0_policy, str):
        if s0_policy != "uniform":
            raise ValueError(f"unknown s0 policy {s0_policy!r}")
        pool = np.arange(D) if conditioning_sites is None else np.asarray(conditioning_sites)
        s0 = pool[rng.integers(0, len(pool), n_fields)]
    else:
        s0 = np.full(n_fields, int(s0_policy))
    y0 = threshold_t + rng.standard_exponential(n_fields)
    gauss = rng.standard_normal((n_fields, D - 1))
    values = np.empty((n_fields, D))
    for site in np.unique(s0):
        rows = np.flatnonzero(s0 == site)
        remote = np.delete(np.arange(D), site)
        law = residual_law(dist[site, remote], dist[np.ix_(remote, remote)], params)
        q = gauss[rows] @ law.chol.T
        z = dl_from_normal_score(q, law.mean, law.scale, params.delta_dl)
        ya = y0[rows, None] * alpha_fn(dist[site, remote], params)[None, :]
        b = 1.0 + ya**params.beta
        values[np.ix_(rows, remote)] = ya + b * z
        values[rows, site] = y0[rows]
    return SimulatedFields(s0, y0, values, coords, float(threshold_t))


def simulate_exceedance_data(params, coords, site_ids, n_per_site, threshold_q=0.95,
                             remote_subsample=None, seed=0) -> CseData:
    """Conditional samples at every site, packaged for ``composite_nll``."""
    t = to_laplace(threshold_q)
    samples = []
    for s0 in range(len(coords)):
        sim = simulate_cse(params, coords, s0, n_per_site, seed=[int(seed), int(site_ids[s0])], threshold_t=t)
        samples.append((s0, sim.y0, sim.values))
    return CseData.from_samples(coords, site_ids, samples, threshold_q, remote_subsample, seed)


# --- model-based summaries ------------------------------------------------------------


@dataclass
class ChiCurve:
    edges: np.ndarray
    centers: np.ndarray
    chi: np.ndarray
    counts: np.ndarray
    u: float


def model_chi(fit, u: float = 0.95, n_sim: int = 10000, seed: int = 0, n_bins: int = 10) -> ChiCurve:
    """Monte Carlo ``chi_u(h)`` binned by distance from the conditioning site."""
    t_u = to_laplace(u)
    if t_u < fit.threshold_t - 1e-12:
        raise ValueError("u must not be below the fitted conditioning threshold")
    sim = simulate_cse(fit, n_fields=n_sim, seed=seed)
    keep = sim.y0 > t_u
    dist = _distances(sim.coords)
    h = dist[sim.s0[keep]]
    exceed = sim.values[keep] > t_u
    off = np.ones_like(h, dtype=bool)
    off[np.arange(len(h)), sim.s0[keep]] = False
    hv, ev = h[off], exceed[off]
    edges = np.linspace(0.0, float(dist.max()), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, hv, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    hits = np.bincount(idx, weights=ev.astype(float), minlength=n_bins)
    with np.errstate(invalid="ignore"):
        chi = hits / counts
    return ChiCurve(edges, 0.5 * (edges[1:] + edges[:-1]), chi, counts, u)


@dataclass
class ExceedancePct:
    per_field: np.ndarray  # n_sim x fields_per_sim
    per_sim: np.ndarray


def conditional_exceedance_pct(fit, s0, u: float = 0.95, n_sim: int = 50,
                               fields_per_sim: int = 1000, seed: int = 0) -> ExceedancePct:
    """Share (%) of remote sites above ``F_L^{-1}(u)`` given an exceedance at ``s0``."""
    t_u = to_laplace(u)
    D = len(fit.coords)
    pos = {int(s): i for i, s in enumerate(fit.site_ids)}
    site = pos[int(s0)]
    per_field = np.empty((n_sim, fields_per_sim))
    seeds = np.random.SeedSequence(seed).spawn(n_sim)
    remote = np.delete(np.arange(D), site)
    for i, ss in enumerate(seeds):
        sim = simulate_cse(fit, s0_policy=site, n_fields=fields_per_sim, seed=ss)
        per_field[i] = 100.0 * np.mean(sim.values[:, remote] > t_u, axis=1)
    return ExceedancePct(per_field, per_field.mean(axis=1))


def fit_from_params(params: CseParams, coords, site_ids=None, threshold_q=0.95) -> CseFit:
    """Wrap known parameters as a fit for simulation."""
    coords = np.asarray(coords, float)
    ids = np.arange(1, len(coords) + 1) if site_ids is None else np.asarray(site_ids)
    return CseFit(
        params, threshold_q, float(to_laplace(threshold_q)), [int(s) for s in ids], None, 0,
        math.nan, True, 0, coords, ids,
    )
