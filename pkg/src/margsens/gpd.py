"""Generalised Pareto tail models, trend selection, PIT and threshold choice."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2, rankdata

from ._backend import kernels
from .errors import (
    DegenerateSample,
    DomainError,
    FitFailure,
    InsufficientExceedances,
    SelectionFailure,
)

log = logging.getLogger(__name__)

MIN_EXCEEDANCES = 10
XI_BOX = (-0.9, 1.0)
XI_ZERO = 1e-8
PIT_CEILING = 1.0 - 1e-10
TRENDS = ("none", "linear", "seasonal", "both")

DEFAULT_EQD_GRID = tuple(np.round(np.arange(0.50, 0.95 + 1e-9, 0.025), 3))
DEFAULT_EQD_PROBS = tuple(0.99 * np.arange(1, 21) / 20)


@dataclass(frozen=True)
class GpdParams:
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"GPD scale must be positive, got {self.sigma}")

    @property
    def upper_bound(self) -> float:
        """Upper end of the support (``inf`` unless ``xi < 0``)."""
        return -self.sigma / self.xi if self.xi < -XI_ZERO else math.inf


@dataclass(frozen=True)
class GpdFit:
    params: GpdParams
    nll: float
    n: int
    converged: bool = True

    @property
    def sigma(self):
        return self.params.sigma

    @property
    def xi(self):
        return self.params.xi


def gpd_cdf(x, params: GpdParams):
    """Distribution function of GPD excesses.

    Uses the exponential limit when ``|xi| < 1e-8``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("GPD excesses must be non-negative")
    s, xi = params.sigma, params.xi
    if abs(xi) < XI_ZERO:
        out = -np.expm1(-x / s)
    else:
        w = xi * x / s
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(w > -1.0, -np.expm1(-np.log1p(np.maximum(w, -1.0)) / xi), 1.0)
    return out if out.ndim else float(out)


def gpd_quantile(p, params: GpdParams):
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p >= 1)):
        raise DomainError("GPD quantile level must lie in [0, 1)")
    s, xi = params.sigma, params.xi
    if abs(xi) < XI_ZERO:
        out = -s * np.log1p(-p)
    else:
        out = s / xi * np.expm1(-xi * np.log1p(-p))
    return out if out.ndim else float(out)


def gpd_nll(excesses, params: GpdParams) -> float:
    return kernels.gpd_nll(np.asarray(excesses, float), math.log(params.sigma), params.xi)


def _moment_start(x):
    m = float(np.mean(x))
    v = float(np.var(x))
    ratio = m * m / v if v > 0 else 1.0
    xi0 = float(np.clip(0.5 * (1.0 - ratio), -0.5, 0.5))
    sigma0 = 0.5 * m * (ratio + 1.0)
    if not sigma0 > 0:
        sigma0 = m
    return np.array([math.log(sigma0), xi0])


def _perturbed_starts(base, scales, n, rng):
    starts = []
    for _ in range(n):
        s = base + rng.normal(0.0, scales)
        s[-1] = float(np.clip(s[-1], XI_BOX[0] + 0.05, XI_BOX[1] - 0.05))
        starts.append(s)
    return starts


def fit_gpd(excesses, n_restarts: int = 5, seed: int = 0) -> GpdFit:
    """Maximum likelihood GPD fit by simplex search on ``(log sigma, xi)``.

    The search starts from moment estimates and is repeated from
    ``n_restarts`` random perturbations; the best optimum is kept.  The shape
    is confined to ``(-0.9, 1.0)``.
    """
    x = np.ascontiguousarray(excesses, dtype=float)
    if x.ndim != 1:
        raise ValueError("excesses must be one-dimensional")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("excesses must be finite and non-negative")
    if len(x) < MIN_EXCEEDANCES:
        raise InsufficientExceedances(f"{len(x)} excesses, need at least {MIN_EXCEEDANCES}")
    if np.ptp(x) == 0:
        raise DegenerateSample("all excesses are equal")

    rng = np.random.default_rng(seed)
    base = _moment_start(x)
    best = kernels.simplex_gpd(x, base)
    for start in _perturbed_starts(best[0], np.array([0.3, 0.15]), n_restarts, rng):
        res = kernels.simplex_gpd(x, start)
        if res[1] < best[1]:
            best = res
    theta, fval, _, converged = best
    if not math.isfinite(fval):
        raise FitFailure("GPD likelihood not finite at any start")
    return GpdFit(GpdParams(math.exp(theta[0]), float(theta[1])), float(fval), len(x), bool(converged))


# --- covariate-linked scale -------------------------------------------------


def _trend_columns(trend):
    return {
        "none": (),
        "linear": ("gmt",),
        "seasonal": ("cos", "sin"),
        "both": ("gmt", "cos", "sin"),
    }[trend]


def trend_design(gmt, day_index, season_length, trend, gmt_center=0.0):
    """Design matrix for ``log sigma_u(z)``: intercept plus trend columns."""
    if trend not in TRENDS:
        raise ValueError(f"unknown trend {trend!r}")
    gmt = np.asarray(gmt, float)
    cols = [np.ones(len(gmt))]
    for name in _trend_columns(trend):
        if name == "gmt":
            cols.append(gmt - gmt_center)
        elif name == "cos":
            cols.append(np.cos(2 * np.pi * np.asarray(day_index) / season_length))
        else:
            cols.append(np.sin(2 * np.pi * np.asarray(day_index) / season_length))
    return np.column_stack(cols)


@dataclass
class NsGpdFit:
    """GPD with covariate-dependent scale and constant shape.

    ``beta_sigma`` multiplies ``[1, gmt, cos(2 pi d/L), sin(2 pi d/L)]``
    restricted to the columns of ``trend``, with gmt on its original scale.
    """

    threshold_q: float
    threshold_value: float
    trend: str
    beta_sigma: np.ndarray
    xi: float
    nll: float
    n_exceed: int
    season_length: int
    converged: bool = True
    lrt: dict | None = None

    def log_sigma(self, gmt, day_index):
        design = trend_design(gmt, day_index, self.season_length, self.trend)
        return design @ np.asarray(self.beta_sigma)

    def sigma(self, covariates):
        return np.exp(self.log_sigma(covariates.gmt, covariates.day_index))

    def to_dict(self):
        d = asdict(self)
        d["beta_sigma"] = [float(b) for b in self.beta_sigma]
        return d


def fit_gpd_ns(
    residuals,
    covariates,
    threshold_value: float,
    trend: str = "none",
    threshold_q: float | None = None,
    n_restarts: int = 5,
    seed: int = 0,
    starts=(),
    base_fit: GpdFit | None = None,
) -> NsGpdFit:
    """Fit GPD exceedances of ``threshold_value`` with a log-linear scale trend.

    ``starts`` may hold extra initial points ``(beta_raw..., xi)`` in the
    original gmt parametrisation, used to warm-start nested models.
    """
    if trend not in TRENDS:
        raise ValueError(f"unknown trend {trend!r}")
    r = np.asarray(residuals, float)
    mask = r > threshold_value
    n_exc = int(mask.sum())
    if n_exc < MIN_EXCEEDANCES:
        raise InsufficientExceedances(f"{n_exc} exceedances, need at least {MIN_EXCEEDANCES}")
    if threshold_q is None:
        threshold_q = float(np.mean(r <= threshold_value))
    excess = r[mask] - threshold_value
    L = covariates.season_length

    if trend == "none":
        g = base_fit or fit_gpd(excess, n_restarts=n_restarts, seed=seed)
        return NsGpdFit(
            threshold_q, float(threshold_value), "none", np.array([math.log(g.sigma)]),
            g.xi, g.nll, n_exc, L, g.converged,
        )

    gmt = np.asarray(covariates.gmt, float)[mask]
    day = np.asarray(covariates.day_index)[mask]
    center = float(np.mean(covariates.gmt))
    design = trend_design(gmt, day, L, trend, gmt_center=center)
    has_gmt = "gmt" in _trend_columns(trend)

    def to_centered(theta):
        theta = np.array(theta, float)
        if has_gmt:
            theta[0] += theta[1] * center
        return theta

    def to_raw(theta):
        theta = np.array(theta, float)
        if has_gmt:
            theta[0] -= theta[1] * center
        return theta

    stat = base_fit or fit_gpd(excess, n_restarts=n_restarts, seed=seed)
    x0 = np.zeros(design.shape[1] + 1)
    x0[0] = math.log(stat.sigma)
    x0[-1] = stat.xi
    candidates = [x0] + [to_centered(s) for s in starts]
    rng = np.random.default_rng(seed)
    best = None
    for c in candidates:
        res = kernels.simplex_gpd_ns(excess, design, c)
        if best is None or res[1] < best[1]:
            best = res
    scales = np.full(len(x0), 0.2)
    scales[-1] = 0.15
    for c in _perturbed_starts(best[0], scales, n_restarts, rng):
        res = kernels.simplex_gpd_ns(excess, design, c)
        if res[1] < best[1]:
            best = res
    theta, fval, _, converged = best
    if not math.isfinite(fval):
        raise FitFailure(f"non-stationary GPD ({trend}) likelihood not finite")
    theta = to_raw(theta)
    return NsGpdFit(
        threshold_q, float(threshold_value), trend, theta[:-1], float(theta[-1]),
        float(fval), n_exc, L, bool(converged),
    )


def _embed(fit: NsGpdFit, target: str):
    """Express ``fit`` as a parameter vector of the larger model ``target``."""
    names = ("intercept",) + _trend_columns(fit.trend)
    coef = dict(zip(names, fit.beta_sigma))
    out = [coef.get(n, 0.0) for n in ("intercept",) + _trend_columns(target)]
    return np.array(out + [fit.xi])


def select_trend_lrt(
    residuals, covariates, threshold_value, level: float = 0.05,
    threshold_q=None, n_restarts: int = 5, seed: int = 0,
):
    """Forward likelihood-ratio selection among none/linear/seasonal/both.

    Linear and seasonal are each tested against the stationary model at a
    Bonferroni-split ``level / 2``; if either is significant the better one is
    tested against ``both`` at ``level``.  Returns ``(trend, fit)``; the fit's
    ``lrt`` attribute records deviances and critical values.
    """
    r = np.asarray(residuals, float)
    excess = r[r > threshold_value] - threshold_value
    base = fit_gpd(excess, n_restarts=n_restarts, seed=seed)
    kw = dict(threshold_q=threshold_q, n_restarts=n_restarts, seed=seed, base_fit=base)
    fits = {"none": fit_gpd_ns(residuals, covariates, threshold_value, "none", **kw)}
    for t in ("linear", "seasonal"):
        fits[t] = fit_gpd_ns(
            residuals, covariates, threshold_value, t, starts=[_embed(fits["none"], t)], **kw
        )
    fits["both"] = fit_gpd_ns(
        residuals, covariates, threshold_value, "both",
        starts=[_embed(fits["linear"], "both"), _embed(fits["seasonal"], "both")], **kw,
    )
    df = {"none": 0, "linear": 1, "seasonal": 2, "both": 3}
    table = {"level": level, "nll": {k: f.nll for k, f in fits.items()}, "tests": []}

    def test(small, big, alpha):
        dev = max(2.0 * (fits[small].nll - fits[big].nll), 0.0)
        ddf = df[big] - df[small]
        crit = float(chi2.ppf(1.0 - alpha, ddf))
        pval = float(chi2.sf(dev, ddf))
        table["tests"].append(
            {"null": small, "alt": big, "deviance": dev, "df": ddf, "critical": crit,
             "p_value": pval, "reject": dev > crit}
        )
        return dev > crit, pval

    accepted = []
    for t in ("linear", "seasonal"):
        reject, pval = test("none", t, level / 2.0)
        if reject:
            accepted.append((pval, t))
    choice = "none"
    if accepted:
        choice = min(accepted)[1]
        reject, _ = test(choice, "both", level)
        if reject:
            choice = "both"
    chosen = fits[choice]
    chosen.lrt = table
    return choice, chosen


# --- probability integral transform -----------------------------------------


def semiparametric_pit(residuals, fit: NsGpdFit, covariates, return_warnings=False):
    """Map a residual series to (0, 1): midranks below the threshold, GPD above.

    The tail weight is the empirical non-exceedance level of the threshold,
    ``#{r <= u} / (n + 1)``, so both branches agree at ``r = u``.
    """
    r = np.asarray(residuals, float)
    n = len(r)
    u = fit.threshold_value
    ranks = rankdata(r, method="average")
    out = ranks / (n + 1.0)
    above = r > u
    level = float(np.sum(~above)) / (n + 1.0)
    msgs = []
    if np.any(above):
        ls = fit.log_sigma(covariates.gmt, covariates.day_index)[above]
        sigma = np.exp(ls)
        w = fit.xi * (r[above] - u) / sigma
        if abs(fit.xi) < XI_ZERO:
            surv = np.exp(-(r[above] - u) / sigma)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                surv = np.where(w > -1.0, np.exp(-np.log1p(np.maximum(w, -1.0)) / fit.xi), 0.0)
        tail = 1.0 - (1.0 - level) * surv
        n_clamped = int(np.sum(tail > PIT_CEILING))
        if n_clamped:
            msg = f"{n_clamped} values beyond the fitted GPD support clamped to 1 - 1e-10"
            msgs.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        out[above] = np.minimum(tail, PIT_CEILING)
    return (out, msgs) if return_warnings else out


def to_laplace(u):
    """Standard Laplace quantile function."""
    u = np.asarray(u, float)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("uniform values must lie strictly inside (0, 1)")
    out = np.where(u <= 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))
    return out if out.ndim else float(out)


def from_laplace(x):
    """Standard Laplace distribution function."""
    x = np.asarray(x, float)
    out = np.where(x <= 0, 0.5 * np.exp(np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(x, 0.0)))
    return out if out.ndim else float(out)


# --- threshold selection ----------------------------------------------------


@dataclass
class ThresholdChoice:
    q: float
    eqd_curve: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def to_dict(self):
        return {"q": self.q, "eqd_curve": self.eqd_curve, "excluded": self.excluded}


def select_threshold_eqd(
    series,
    candidate_grid=DEFAULT_EQD_GRID,
    n_boot: int = 100,
    prob_grid=DEFAULT_EQD_PROBS,
    seed: int = 0,
    n_restarts: int = 2,
) -> ThresholdChoice:
    """Pick the quantile level whose GPD fit minimises the expected quantile discrepancy.

    For each candidate level the excesses are bootstrapped ``n_boot`` times;
    every resample gets its own GPD fit, and the mean absolute difference
    between its sample quantiles and the fitted quantiles at ``prob_grid`` is
    averaged over resamples.
    """
    x = np.asarray(series, float)
    grid = np.asarray(candidate_grid, float)
    if np.any((grid <= 0) | (grid >= 1)) or np.any(np.diff(grid) <= 0):
        raise ValueError("candidate grid must be ascending inside (0, 1)")
    probs = np.asarray(prob_grid, float)
    seeds = np.random.SeedSequence(seed).spawn(len(grid))
    curve, excluded = [], []
    for q, ss in zip(grid, seeds):
        u = float(np.quantile(x, q))
        exc = x[x > u] - u
        try:
            g = fit_gpd(exc, n_restarts=n_restarts, seed=int(ss.generate_state(1)[0]))
        except (InsufficientExceedances, DegenerateSample, FitFailure) as err:
            excluded.append((float(q), str(err)))
            continue
        rng = np.random.default_rng(ss)
        boot = np.sort(exc[rng.integers(0, len(exc), size=(n_boot, len(exc)))], axis=1)
        d, n_fail = kernels.eqd_bootstrap(boot, probs, np.array([math.log(g.sigma), g.xi]))
        if not math.isfinite(d):
            excluded.append((float(q), "all bootstrap fits failed"))
            continue
        curve.append((float(q), float(d)))
    if not curve:
        raise SelectionFailure("no candidate threshold admitted a GPD fit")
    q_best = min(curve, key=lambda c: c[1])[0]
    return ThresholdChoice(q_best, curve, excluded)
