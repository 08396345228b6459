"""Spatio-temporal field containers and CSV ingestion.

Fields are stored as a ``D x T`` matrix (sites by time).  The only on-disk
format is a long CSV with columns ``site_id,lon,lat,date,value``; covariates
live in a separate ``date,gmt`` CSV.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CovariateGap, IncompleteGrid, ParseError

SCALES = ("raw", "uniform", "laplace")
FIELD_COLUMNS = ("site_id", "lon", "lat", "date", "value")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SiteSet:
    """Site identifiers with planar coordinates.

    Distances are Euclidean in whatever units the coordinates carry; converting
    degrees to kilometres is left to the caller.
    """

    ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, dtype=np.int64))
        object.__setattr__(self, "lon", _frozen(self.lon))
        object.__setattr__(self, "lat", _frozen(self.lat))
        n = len(self.ids)
        if n < 2:
            raise ValueError("a SiteSet needs at least two sites")
        if len(self.lon) != n or len(self.lat) != n:
            raise ValueError("ids and coordinates differ in length")
        if len(np.unique(self.ids)) != n:
            raise ValueError("site ids must be unique")
        if not (np.all(np.isfinite(self.lon)) and np.all(np.isfinite(self.lat))):
            raise ValueError("site coordinates must be finite")

    def __len__(self):
        return len(self.ids)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def distances(self) -> np.ndarray:
        """Pairwise Euclidean distance matrix."""
        c = self.coords
        diff = c[:, None, :] - c[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def subset(self, index) -> "SiteSet":
        index = np.asarray(index)
        return SiteSet(self.ids[index], self.lon[index], self.lat[index])

    @classmethod
    def grid(cls, nx: int, ny: int, spacing: float = 1.0) -> "SiteSet":
        xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
        return cls(np.arange(1, nx * ny + 1), xs.ravel(), ys.ravel())


@dataclass(frozen=True)
class SpatioTemporalField:
    sites: SiteSet
    dates: np.ndarray
    values: np.ndarray
    scale: str = "raw"

    def __post_init__(self):
        dates = np.asarray(self.dates).astype("datetime64[D]")
        dates.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", _frozen(self.values))
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.values.shape != (len(self.sites), len(dates)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.sites)} sites x {len(dates)} dates"
            )
        if len(dates) > 1 and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise ValueError("dates must be strictly increasing")
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite (no missing data)")
        if self.scale == "uniform" and (v.min() <= 0.0 or v.max() >= 1.0):
            raise ValueError("uniform-scale values must lie strictly inside (0, 1)")

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(int) + 1970

    def with_values(self, values, scale=None) -> "SpatioTemporalField":
        return SpatioTemporalField(self.sites, self.dates, values, scale or self.scale)

    def window(self, start, end) -> "SpatioTemporalField":
        """Restrict to dates in the closed interval ``[start, end]``.

        ``start``/``end`` may be ISO dates or bare years.
        """
        lo, hi = _window_bounds(start, end)
        keep = (self.dates >= lo) & (self.dates <= hi)
        return SpatioTemporalField(self.sites, self.dates[keep], self.values[:, keep], self.scale)

    def take_sites(self, index) -> "SpatioTemporalField":
        index = np.asarray(index)
        return SpatioTemporalField(
            self.sites.subset(index), self.dates, self.values[index], self.scale
        )


def _window_bounds(start, end):
    def conv(x, upper):
        if isinstance(x, (int, np.integer)) or (isinstance(x, str) and x.isdigit()):
            y = int(x)
            return np.datetime64(f"{y:04d}-12-31" if upper else f"{y:04d}-01-01", "D")
        return np.datetime64(x, "D")

    return conv(start, False), conv(end, True)


@dataclass(frozen=True)
class CovariateTable:
    dates: np.ndarray
    gmt: np.ndarray
    day_index: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates).astype("datetime64[D]")
        dates.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "gmt", _frozen(self.gmt))
        object.__setattr__(self, "day_index", _frozen(self.day_index, dtype=np.int64))
        if not (len(self.gmt) == len(dates) == len(self.day_index)):
            raise ValueError("covariate columns differ in length")

    @property
    def season_length(self) -> int:
        return int(self.day_index.max())

    @classmethod
    def from_dates(cls, dates, gmt) -> "CovariateTable":
        dates = np.asarray(dates).astype("datetime64[D]")
        return cls(dates, gmt, day_index_from_dates(dates))

    def take(self, index) -> "CovariateTable":
        return CovariateTable(self.dates[index], self.gmt[index], self.day_index[index])


@dataclass(frozen=True)
class YearBlocks:
    years: np.ndarray
    blocks: tuple = field(default_factory=tuple)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.blocks])

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def labels(self, n_times: int) -> np.ndarray:
        """Block number (0-based) of every time index."""
        out = np.empty(n_times, dtype=np.int64)
        for k, b in enumerate(self.blocks):
            out[b] = k
        return out


def day_index_from_dates(dates) -> np.ndarray:
    """1-based position of each date within its calendar year's run of dates."""
    years = np.asarray(dates).astype("datetime64[Y]").astype(int)
    out = np.empty(len(years), dtype=np.int64)
    count = 0
    prev = None
    for i, y in enumerate(years):
        count = count + 1 if y == prev else 1
        prev = y
        out[i] = count
    return out


def year_blocks(field_or_dates) -> YearBlocks:
    """Partition time indices into consecutive calendar-year blocks."""
    dates = getattr(field_or_dates, "dates", field_or_dates)
    years = np.asarray(dates).astype("datetime64[Y]").astype(int) + 1970
    if len(years) == 0:
        return YearBlocks(np.array([], dtype=int), ())
    starts = np.flatnonzero(np.r_[True, years[1:] != years[:-1]])
    stops = np.r_[starts[1:], len(years)]
    blocks = tuple(np.arange(a, b) for a, b in zip(starts, stops))
    return YearBlocks(years[starts], blocks)


def load_field(path) -> SpatioTemporalField:
    """Read a long-format ``site_id,lon,lat,date,value`` CSV into a raw field."""
    path = Path(path)
    cells = {}
    coords = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FIELD_COLUMNS:
            raise ParseError(1, f"expected header {','.join(FIELD_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(lineno, f"expected 5 columns, got {len(row)}")
            try:
                sid = int(row[0])
                lon = float(row[1])
                lat = float(row[2])
                date = np.datetime64(row[3].strip(), "D")
                value = float(row[4])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not (math.isfinite(lon) and math.isfinite(lat) and math.isfinite(value)):
                raise ParseError(lineno, "non-finite number")
            if sid in coords and coords[sid] != (lon, lat):
                raise ParseError(lineno, f"site {sid} has inconsistent coordinates")
            coords[sid] = (lon, lat)
            key = (sid, date)
            if key in cells:
                raise ParseError(lineno, f"duplicate row for site {sid} on {date}")
            cells[key] = value

    ids = sorted(coords)
    dates = np.array(sorted({d for _, d in cells}), dtype="datetime64[D]")
    col = {d: j for j, d in enumerate(dates)}
    row_of = {s: i for i, s in enumerate(ids)}
    values = np.full((len(ids), len(dates)), np.nan)
    for (sid, date), v in cells.items():
        values[row_of[sid], col[date]] = v
    missing = np.argwhere(np.isnan(values))
    if len(missing):
        i, j = missing[0]
        raise IncompleteGrid(ids[i], str(dates[j]))
    sites = SiteSet(ids, [coords[s][0] for s in ids], [coords[s][1] for s in ids])
    return SpatioTemporalField(sites, dates, values, "raw")


def write_field(field: SpatioTemporalField, path) -> None:
    """Write a field in the long CSV schema.

    Values use ``repr`` formatting, which round-trips float64 exactly.
    """
    path = Path(path)
    s = field.sites
    date_str = [str(d) for d in field.dates]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_COLUMNS)
        for i in range(field.n_sites):
            sid, lon, lat = int(s.ids[i]), repr(float(s.lon[i])), repr(float(s.lat[i]))
            vals = field.values[i]
            w.writerows(
                (sid, lon, lat, date_str[j], repr(float(vals[j]))) for j in range(field.n_times)
            )


def load_covariates(path, dates) -> CovariateTable:
    """Join a ``date,gmt`` CSV onto the given field dates."""
    path = Path(path)
    gmt_by_date = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["date", "gmt"]:
            raise ParseError(1, "expected header date,gmt")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                gmt_by_date[np.datetime64(row[0].strip(), "D")] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ParseError(lineno, str(exc)) from None
    dates = np.asarray(dates).astype("datetime64[D]")
    gmt = np.empty(len(dates))
    for j, d in enumerate(dates):
        if d not in gmt_by_date:
            raise CovariateGap(str(d))
        gmt[j] = gmt_by_date[d]
    return CovariateTable(dates, gmt, day_index_from_dates(dates))


def write_covariates(cov: CovariateTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "gmt"])
        w.writerows((str(d), repr(float(g))) for d, g in zip(cov.dates, cov.gmt))
