"""Empirical extremal-dependence measures.

``chi_u`` is estimated as a conditional exceedance frequency and ``eta_u`` by
the plug-in ``log(1 - u) / log(p_joint)``.  Pairs are ordered: in
``chi[j, k]`` site ``k`` is the conditioning site.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import SpatioTemporalField
from .errors import AlignmentError, NoJointExceedances, WindowTooShort
from .gpd import to_laplace

MIN_EXPECTED_EXCEEDANCES = 5


def _check_u(u):
    if not (0.0 < u < 1.0):
        raise ValueError("u must lie in (0, 1)")


def rank_uniform(x, axis=-1):
    """Midrank / (n + 1) along ``axis``."""
    x = np.asarray(x, float)
    return rankdata(x, axis=axis, method="average") / (x.shape[axis] + 1.0)


def _pair_exceed(x_j, x_k, u, rerank):
    x_j = np.asarray(x_j, float)
    x_k = np.asarray(x_k, float)
    if x_j.shape != x_k.shape or x_j.ndim != 1:
        raise AlignmentError("series must be one-dimensional and of equal length")
    _check_u(u)
    if rerank:
        x_j, x_k = rank_uniform(x_j), rank_uniform(x_k)
    return x_j > u, x_k > u


def chi_u_pair(x_j, x_k, u, rerank: bool = True) -> float:
    """``#{x_j > u and x_k > u} / #{x_k > u}``; NaN without conditioning exceedances.

    With ``rerank`` the series are first mapped to ranks / (n + 1), which makes
    the estimate invariant to increasing marginal transforms.
    """
    ej, ek = _pair_exceed(x_j, x_k, u, rerank)
    den = int(ek.sum())
    if den == 0:
        return math.nan
    return int((ej & ek).sum()) / den


def eta_u_pair(x_j, x_k, u, rerank: bool = True) -> float:
    """Plug-in ``log(1 - u) / log(p_joint)`` clamped to ``(0, 1]``."""
    ej, ek = _pair_exceed(x_j, x_k, u, rerank)
    joint = int((ej & ek).sum())
    if joint == 0:
        raise NoJointExceedances("no joint exceedances of u")
    return float(_eta_from_prob(np.array([joint / len(ej)]), u)[0])


def _eta_from_prob(p, u):
    """Vectorised plug-in eta for joint exceedance probabilities ``p`` in (0, 1]."""
    p = np.asarray(p, float)
    eta = np.ones_like(p)
    below = p < 1.0
    eta[below] = np.minimum(math.log1p(-u) / np.log(p[below]), 1.0)
    return eta


@dataclass
class PairwiseDependence:
    site_ids: np.ndarray
    coords: np.ndarray
    chi: np.ndarray  # D x D, chi[j, k] conditions on site k; NaN diagonal
    eta: np.ndarray  # D x D, symmetric; NaN diagonal and where no joint exceedances
    distance: np.ndarray
    u: float
    time_window: tuple

    def pairs(self):
        """Ordered pairs ``(j, k)`` with ``j != k`` in row-major order."""
        D = len(self.site_ids)
        j, k = np.nonzero(~np.eye(D, dtype=bool))
        return j, k

    def rows(self):
        """Plot-ready records ``(site_j, site_k, h, chi, eta)``."""
        j, k = self.pairs()
        return [
            (int(self.site_ids[a]), int(self.site_ids[b]), float(self.distance[a, b]),
             float(self.chi[a, b]), float(self.eta[a, b]))
            for a, b in zip(j, k)
        ]


@dataclass
class SiteAverages:
    site_ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    chi_bar: np.ndarray
    eta_bar: np.ndarray
    u: float
    time_window: tuple


@dataclass
class PeriodDifference:
    site_ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    d_chi: np.ndarray
    d_eta: np.ndarray
    first: SiteAverages
    second: SiteAverages


@dataclass
class DistanceBlockSummary:
    edges: np.ndarray
    counts: np.ndarray
    summary: np.ndarray  # n_blocks x 5: min, q1, median, q3, max (NaN when empty)


def _as_field(obj):
    """Return ``(field, is_detrended)`` for a DetrendedField or plain field."""
    laplace = getattr(obj, "laplace", None)
    if laplace is not None and hasattr(obj, "uniform"):
        return obj.uniform, True
    if isinstance(obj, SpatioTemporalField):
        return obj, obj.scale != "raw"
    raise TypeError("expected a DetrendedField or SpatioTemporalField")


def _exceedance_matrix(fld: SpatioTemporalField, u, rerank):
    v = fld.values
    if rerank:
        return rank_uniform(v, axis=1) > u
    if fld.scale == "uniform":
        return v > u
    if fld.scale == "laplace":
        return v > to_laplace(u)
    raise ValueError("a raw-scale field must be re-ranked before thresholding")


def pairwise_dependence(obj, u, time_window=None, rerank=None) -> PairwiseDependence:
    """All ordered-pair ``chi_u`` and ``eta_u`` estimates within a window.

    ``rerank`` defaults to False for detrended (uniform or Laplace) inputs and
    True for raw fields.
    """
    _check_u(u)
    fld, detrended = _as_field(obj)
    if rerank is None:
        rerank = not detrended
    if time_window is not None:
        fld = fld.window(*time_window)
    T = fld.n_times
    if T * (1.0 - u) < MIN_EXPECTED_EXCEEDANCES:
        raise WindowTooShort(
            f"{T} time points give {T * (1 - u):.1f} expected exceedances of u={u}"
        )
    E = _exceedance_matrix(fld, u, rerank).astype(np.float64)
    J = E @ E.T
    n_k = np.diag(J).copy()
    D = fld.n_sites
    off = ~np.eye(D, dtype=bool)
    with np.errstate(invalid="ignore", divide="ignore"):
        chi = np.where(n_k[None, :] > 0, J / np.where(n_k > 0, n_k, 1.0)[None, :], np.nan)
    eta = np.full((D, D), np.nan)
    has = off & (J > 0)
    eta[has] = _eta_from_prob(J[has] / T, u)
    chi[~off] = np.nan
    if np.any(off & (J == 0)):
        warnings.warn("some pairs have no joint exceedances; their eta is NaN", RuntimeWarning, stacklevel=2)
    window = (str(fld.dates[0]), str(fld.dates[-1])) if T else (None, None)
    return PairwiseDependence(
        fld.sites.ids.copy(), fld.sites.coords, chi, eta, fld.sites.distances(), float(u), window
    )


def site_averages(obj, u, time_window=None, rerank=None) -> SiteAverages:
    """Per-conditioning-site means of ``chi_u`` and ``eta_u`` over partner sites."""
    pw = pairwise_dependence(obj, u, time_window, rerank)
    return _averages(pw)


def _averages(pw: PairwiseDependence) -> SiteAverages:
    D = len(pw.site_ids)
    off = ~np.eye(D, dtype=bool)
    # conditioning site k is the column
    chi_valid = off & np.isfinite(pw.chi)
    eta_valid = off & np.isfinite(pw.eta)
    with np.errstate(invalid="ignore"):
        chi_bar = np.where(chi_valid, pw.chi, 0.0).sum(0) / chi_valid.sum(0)
        eta_bar = np.where(eta_valid, pw.eta, 0.0).sum(0) / eta_valid.sum(0)
    return SiteAverages(
        pw.site_ids, pw.coords[:, 0], pw.coords[:, 1], chi_bar, eta_bar, pw.u, pw.time_window
    )


def period_difference(obj, u, window1, window2, rerank=None) -> PeriodDifference:
    """``site_averages(window1) - site_averages(window2)`` per site."""
    a = site_averages(obj, u, window1, rerank)
    b = site_averages(obj, u, window2, rerank)
    return PeriodDifference(a.site_ids, a.lon, a.lat, a.chi_bar - b.chi_bar, a.eta_bar - b.eta_bar, a, b)


def distance_blocks(pw: PairwiseDependence, n_blocks: int = 10) -> DistanceBlockSummary:
    """Five-number summaries of pairwise ``chi_u`` in equidistant distance bins."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be at least 1")
    j, k = pw.pairs()
    h = pw.distance[j, k]
    chi = pw.chi[j, k]
    edges = np.linspace(0.0, float(h.max()), n_blocks + 1)
    # right-closed bins, first bin also closed on the left
    idx = np.clip(np.searchsorted(edges, h, side="left") - 1, 0, n_blocks - 1)
    counts = np.zeros(n_blocks, dtype=int)
    summary = np.full((n_blocks, 5), np.nan)
    for b in range(n_blocks):
        vals = chi[(idx == b) & np.isfinite(chi)]
        counts[b] = int(np.sum(idx == b))
        if len(vals):
            summary[b] = np.percentile(vals, [0, 25, 50, 75, 100])
    return DistanceBlockSummary(edges, counts, summary)
