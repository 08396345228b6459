"""The four marginal detrending pipelines (margins A to D).

Every pipeline maps a raw field to uniform and standard-Laplace margins
site by site.  A uses yearly-block ranks; B pre-whitens each series with a
penalised location-scale fit and then applies a semiparametric GPD transform
above a constant 0.90 threshold; C inserts a pooled yearly standardisation
between those two steps; D additionally picks the threshold per site by
expected quantile discrepancy.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import CovariateTable, SpatioTemporalField, year_blocks
from .errors import AlignmentError, DegenerateYear, FitFailure, SelectionFailure
from .gpd import (
    DEFAULT_EQD_GRID,
    DEFAULT_EQD_PROBS,
    NsGpdFit,
    ThresholdChoice,
    select_threshold_eqd,
    select_trend_lrt,
    semiparametric_pit,
    to_laplace,
)
from .smooth import TrendFit, default_bases, fit_location_scale, residuals

PIPELINES = ("A", "B", "C", "D")
FALLBACK_Q = 0.90


@dataclass(frozen=True)
class EqdConfig:
    candidate_grid: tuple = DEFAULT_EQD_GRID
    n_boot: int = 100
    prob_grid: tuple = DEFAULT_EQD_PROBS


@dataclass
class SiteRecord:
    """Per-site provenance of a detrending run."""

    site_id: int
    trend: TrendFit | None = None
    gpd: NsGpdFit | None = None
    threshold: ThresholdChoice | None = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "site_id": self.site_id,
            "trend": None if self.trend is None else self.trend.to_dict(),
            "gpd": None if self.gpd is None else self.gpd.to_dict(),
            "threshold": None if self.threshold is None else self.threshold.to_dict(),
            "notes": list(self.notes),
        }


@dataclass
class DetrendedField:
    uniform: SpatioTemporalField
    laplace: SpatioTemporalField
    pipeline: str
    per_site_fits: list
    yearly_stats: dict | None = None

    @property
    def sites(self):
        return self.uniform.sites

    @property
    def dates(self):
        return self.uniform.dates

    def thresholds(self) -> np.ndarray:
        """GPD threshold level per site (NaN for margins A)."""
        return np.array(
            [np.nan if r.gpd is None else r.gpd.threshold_q for r in self.per_site_fits]
        )

    def provenance(self) -> dict:
        out = {
            "pipeline": self.pipeline,
            "sites": [r.to_dict() for r in self.per_site_fits],
        }
        if self.yearly_stats is not None:
            out["yearly_stats"] = {k: [float(v) for v in vals] for k, vals in self.yearly_stats.items()}
        return out


def site_seed(seed: int, site_id: int) -> int:
    """Seed that depends on the site id, not its position in the field."""
    return int(np.random.SeedSequence([int(seed), int(site_id)]).generate_state(1)[0])


def _map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


def _check_alignment(fld: SpatioTemporalField, covariates: CovariateTable):
    if fld.scale != "raw":
        raise ValueError(f"pipelines expect a raw-scale field, got {fld.scale!r}")
    if len(covariates.dates) != fld.n_times or np.any(covariates.dates != fld.dates):
        raise AlignmentError("covariate dates do not match field dates")


def _finish(fld, uniform_values, pipeline, records, yearly_stats=None):
    uniform = fld.with_values(uniform_values, "uniform")
    laplace = fld.with_values(to_laplace(uniform_values), "laplace")
    return DetrendedField(uniform, laplace, pipeline, records, yearly_stats)


# --- margins A ---------------------------------------------------------------


def yearly_ranks(values, blocks) -> np.ndarray:
    """Midrank / (block size + 1) within each year block, row by row."""
    values = np.atleast_2d(np.asarray(values, float))
    out = np.empty_like(values)
    for b in blocks:
        out[:, b] = rankdata(values[:, b], axis=1, method="average") / (len(b) + 1.0)
    return out


def margins_a(fld: SpatioTemporalField) -> DetrendedField:
    """Rank transform applied independently in every site-year block."""
    if fld.scale != "raw":
        raise ValueError(f"pipelines expect a raw-scale field, got {fld.scale!r}")
    u = yearly_ranks(fld.values, year_blocks(fld).blocks)
    records = [SiteRecord(int(s)) for s in fld.sites.ids]
    return _finish(fld, u, "A", records)


# --- shared stages for B to D -------------------------------------------------


def _trend_job(args):
    series, site_id, gb, db = args
    try:
        fit = fit_location_scale(series, gb, db)
    except FitFailure as err:
        raise FitFailure(str(err), site=site_id) from None
    return fit, residuals(series, fit)


def prewhiten(fld, covariates, gmt_dim=10, day_dim=92, n_jobs=None):
    """Location-scale fit per site; returns ``(residual matrix, fits)``."""
    _check_alignment(fld, covariates)
    gb, db = default_bases(covariates, gmt_dim, day_dim)
    jobs = [(fld.values[i], int(fld.sites.ids[i]), gb, db) for i in range(fld.n_sites)]
    out = _map(_trend_job, jobs, n_jobs)
    fits = [o[0] for o in out]
    resid = np.vstack([o[1] for o in out])
    return resid, fits


def yearly_standardize(resid, dates_or_field=None):
    """Pool all sites within each year and standardise to mean 0, sd 1.

    Returns ``(standardised, stats)`` where ``stats`` holds ``years``, ``m``
    and ``s``.  Accepts a residual matrix with a date vector or a field.
    """
    if isinstance(resid, SpatioTemporalField):
        fld = resid
        z, stats = yearly_standardize(fld.values, fld.dates)
        return fld.with_values(z), stats
    resid = np.atleast_2d(np.asarray(resid, float))
    yb = year_blocks(dates_or_field)
    z = np.empty_like(resid)
    m = np.empty(len(yb))
    s = np.empty(len(yb))
    for k, b in enumerate(yb.blocks):
        block = resid[:, b]
        m[k] = block.mean()
        s[k] = block.std()
        if not s[k] > 0:
            raise DegenerateYear(int(yb.years[k]))
        z[:, b] = (block - m[k]) / s[k]
    return z, {"years": yb.years.astype(float), "m": m, "s": s}


def _tail_job(args):
    series, site_id, cov, q, level, seed = args
    u_val = float(np.quantile(series, q))
    try:
        _, fit = select_trend_lrt(series, cov, u_val, level=level, threshold_q=q, seed=seed)
    except FitFailure as err:
        raise FitFailure(str(err), site=site_id) from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        u, msgs = semiparametric_pit(series, fit, cov, return_warnings=True)
    return fit, u, msgs


def _tail_stage(resid, ids, covariates, qs, level, seed, n_jobs):
    jobs = [
        (resid[i], int(ids[i]), covariates, float(qs[i]), level, site_seed(seed, ids[i]))
        for i in range(len(ids))
    ]
    return _map(_tail_job, jobs, n_jobs)


def _records(ids, trend_fits, tail, thresholds=None, extra_notes=None):
    recs = []
    for i, sid in enumerate(ids):
        fit, _, msgs = tail[i]
        notes = list(msgs)
        if extra_notes and extra_notes[i]:
            notes = list(extra_notes[i]) + notes
        recs.append(
            SiteRecord(int(sid), trend_fits[i], fit, None if thresholds is None else thresholds[i], notes)
        )
    return recs


def margins_b(
    fld, covariates, threshold_q: float = 0.90, lrt_level: float = 0.05, seed: int = 0,
    gmt_dim: int = 10, day_dim: int = 92, n_jobs=None,
) -> DetrendedField:
    """Pre-whitening, LRT-selected GPD tail above a constant threshold, PIT."""
    resid, trend_fits = prewhiten(fld, covariates, gmt_dim, day_dim, n_jobs)
    ids = fld.sites.ids
    tail = _tail_stage(resid, ids, covariates, [threshold_q] * len(ids), lrt_level, seed, n_jobs)
    u = np.vstack([t[1] for t in tail])
    return _finish(fld, u, "B", _records(ids, trend_fits, tail))


def margins_c(
    fld, covariates, threshold_q: float = 0.90, lrt_level: float = 0.05, seed: int = 0,
    gmt_dim: int = 10, day_dim: int = 92, n_jobs=None,
) -> DetrendedField:
    """Margins B with pooled yearly standardisation of the residuals."""
    resid, trend_fits = prewhiten(fld, covariates, gmt_dim, day_dim, n_jobs)
    z, stats = yearly_standardize(resid, fld.dates)
    ids = fld.sites.ids
    tail = _tail_stage(z, ids, covariates, [threshold_q] * len(ids), lrt_level, seed, n_jobs)
    u = np.vstack([t[1] for t in tail])
    return _finish(fld, u, "C", _records(ids, trend_fits, tail), stats)


def _eqd_job(args):
    series, site_id, cfg, seed = args
    try:
        choice = select_threshold_eqd(
            series, cfg.candidate_grid, n_boot=cfg.n_boot, prob_grid=cfg.prob_grid, seed=seed
        )
        return choice, None
    except SelectionFailure as err:
        return None, f"threshold selection failed ({err}); fell back to {FALLBACK_Q}"


def margins_d(
    fld, covariates, eqd_config: EqdConfig | None = None, lrt_level: float = 0.05,
    seed: int = 0, gmt_dim: int = 10, day_dim: int = 92, n_jobs=None,
) -> DetrendedField:
    """Margins C with a per-site threshold chosen by expected quantile discrepancy."""
    cfg = eqd_config or EqdConfig()
    resid, trend_fits = prewhiten(fld, covariates, gmt_dim, day_dim, n_jobs)
    z, stats = yearly_standardize(resid, fld.dates)
    ids = fld.sites.ids
    picks = _map(_eqd_job, [(z[i], int(ids[i]), cfg, site_seed(seed, ids[i])) for i in range(len(ids))], n_jobs)
    qs, choices, notes = [], [], []
    for sid, (choice, note) in zip(ids, picks):
        if choice is None:
            warnings.warn(f"site {sid}: {note}", RuntimeWarning, stacklevel=2)
            qs.append(FALLBACK_Q)
            notes.append([note])
        else:
            qs.append(choice.q)
            notes.append([])
        choices.append(choice)
    tail = _tail_stage(z, ids, covariates, qs, lrt_level, seed, n_jobs)
    u = np.vstack([t[1] for t in tail])
    return _finish(fld, u, "D", _records(ids, trend_fits, tail, choices, notes), stats)


def run_pipeline(name: str, fld, covariates=None, **kw) -> DetrendedField:
    """Dispatch by pipeline letter."""
    name = name.upper()
    if name == "A":
        return margins_a(fld)
    if covariates is None:
        raise ValueError(f"margins {name} needs covariates")
    fn = {"B": margins_b, "C": margins_c, "D": margins_d}.get(name)
    if fn is None:
        raise ValueError(f"unknown pipeline {name!r}")
    return fn(fld, covariates, **kw)


def threshold_histogram(det: DetrendedField, bins=None):
    """Counts of selected threshold levels (plot data for margins D)."""
    q = det.thresholds()
    q = q[np.isfinite(q)]
    if bins is None:
        bins = np.r_[np.asarray(DEFAULT_EQD_GRID) - 0.0125, DEFAULT_EQD_GRID[-1] + 0.0125]
    counts, edges = np.histogram(q, bins=bins)
    return counts, edges
