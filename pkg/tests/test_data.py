import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from margsens.data import (
    CovariateTable,
    SiteSet,
    SpatioTemporalField,
    day_index_from_dates,
    load_covariates,
    load_field,
    write_covariates,
    write_field,
    year_blocks,
)
from margsens.errors import CovariateGap, IncompleteGrid, ParseError


def summer_dates(years, n_days=92):
    out = []
    for y in years:
        start = np.datetime64(f"{y}-06-01")
        out.append(start + np.arange(n_days))
    return np.concatenate(out)


def write_rows(path, rows, header="site_id,lon,lat,date,value"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestLoadField:
    def test_minimal_grid(self, tmp_path):
        rows = [
            "2,1.0,0.0,2000-06-02,5.0",
            "1,0.0,0.0,2000-06-01,1.0",
            "1,0.0,0.0,2000-06-02,2.0",
            "2,1.0,0.0,2000-06-01,4.0",
            "1,0.0,0.0,2000-06-03,3.0",
            "2,1.0,0.0,2000-06-03,6.0",
        ]
        f = load_field(write_rows(tmp_path / "f.csv", rows))
        assert f.values.shape == (2, 3)
        assert f.scale == "raw"
        assert_array_equal(f.sites.ids, [1, 2])
        assert_array_equal(f.values, [[1, 2, 3], [4, 5, 6]])
        assert str(f.dates[0]) == "2000-06-01"

    def test_duplicate_row(self, tmp_path):
        rows = ["1,0,0,2000-06-01,1", "2,1,0,2000-06-01,1", "1,0,0,2000-06-01,2"]
        with pytest.raises(ParseError) as exc:
            load_field(write_rows(tmp_path / "f.csv", rows))
        assert exc.value.line == 4

    def test_unparsable_row(self, tmp_path):
        rows = ["1,0,0,2000-06-01,abc", "2,1,0,2000-06-01,1"]
        with pytest.raises(ParseError) as exc:
            load_field(write_rows(tmp_path / "f.csv", rows))
        assert exc.value.line == 2

    def test_missing_cell(self, tmp_path):
        rows = ["1,0,0,2000-06-01,1", "1,0,0,2000-06-02,1", "2,1,0,2000-06-01,1"]
        with pytest.raises(IncompleteGrid) as exc:
            load_field(write_rows(tmp_path / "f.csv", rows))
        assert exc.value.site == 2
        assert exc.value.date == "2000-06-02"

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError):
            load_field(write_rows(tmp_path / "f.csv", ["1,0,0,2000-06-01,1"], header="a,b"))

    @settings(max_examples=25, deadline=None)
    @given(
        vals=st.lists(
            st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6
        )
    )
    def test_round_trip_bit_identical(self, tmp_path_factory, vals):
        sites = SiteSet([1, 2], [0.1, 0.7], [3.3, -2.0])
        f = SpatioTemporalField(sites, summer_dates([2001], 3), np.reshape(vals, (2, 3)))
        path = tmp_path_factory.mktemp("rt") / "f.csv"
        write_field(f, path)
        g = load_field(path)
        assert g.values.tobytes() == f.values.tobytes()
        assert_array_equal(g.sites.lon, f.sites.lon)
        assert_array_equal(g.dates, f.dates)


class TestFieldInvariants:
    def test_uniform_scale_bounds(self):
        sites = SiteSet([1, 2], [0, 1], [0, 0])
        with pytest.raises(ValueError):
            SpatioTemporalField(sites, summer_dates([2000], 2), [[0.5, 1.0], [0.2, 0.3]], "uniform")

    def test_missing_values_rejected(self):
        sites = SiteSet([1, 2], [0, 1], [0, 0])
        with pytest.raises(ValueError):
            SpatioTemporalField(sites, summer_dates([2000], 2), [[np.nan, 1.0], [0.2, 0.3]])

    def test_dates_strictly_increasing(self):
        sites = SiteSet([1, 2], [0, 1], [0, 0])
        d = np.array(["2000-01-02", "2000-01-01"], dtype="datetime64[D]")
        with pytest.raises(ValueError):
            SpatioTemporalField(sites, d, np.zeros((2, 2)))

    def test_immutable(self):
        sites = SiteSet([1, 2], [0, 1], [0, 0])
        f = SpatioTemporalField(sites, summer_dates([2000], 2), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0

    def test_siteset_needs_two_sites(self):
        with pytest.raises(ValueError):
            SiteSet([1], [0], [0])

    def test_distances_euclidean(self):
        s = SiteSet([1, 2, 3], [0, 3, 0], [0, 4, 1])
        d = s.distances()
        assert d[0, 1] == 5.0
        assert d[0, 2] == 1.0
        assert_array_equal(d, d.T)

    def test_window_by_year(self):
        sites = SiteSet([1, 2], [0, 1], [0, 0])
        dates = summer_dates([2000, 2001, 2002], 4)
        f = SpatioTemporalField(sites, dates, np.arange(24.0).reshape(2, 12))
        w = f.window(2001, 2001)
        assert w.n_times == 4
        assert_array_equal(w.values[0], [4, 5, 6, 7])


class TestCovariates:
    def test_day_index_one_season(self):
        d = summer_dates([1990])
        assert_array_equal(day_index_from_dates(d), np.arange(1, 93))

    def test_day_index_resets(self):
        d = summer_dates([1990, 1991])
        idx = day_index_from_dates(d)
        assert idx[92] == 1
        assert_array_equal(idx[92:], np.arange(1, 93))

    def test_load_join_and_gap(self, tmp_path):
        dates = summer_dates(range(1990, 2021))
        gmt = np.repeat(np.linspace(0.0, 0.3, 31), 92)
        cov = CovariateTable.from_dates(dates, gmt)
        write_covariates(cov, tmp_path / "c.csv")
        back = load_covariates(tmp_path / "c.csv", dates)
        assert_array_equal(back.gmt, gmt)
        assert np.all(np.diff(back.gmt) >= 0)
        assert back.season_length == 92
        with pytest.raises(CovariateGap) as exc:
            load_covariates(tmp_path / "c.csv", np.r_[dates, np.datetime64("2021-06-01")])
        assert exc.value.date == "2021-06-01"


class TestYearBlocks:
    def test_paper_layout(self):
        yb = year_blocks(summer_dates(range(1990, 2021)))
        assert len(yb) == 31
        assert np.all(yb.sizes == 92)
        assert_array_equal(yb.blocks[1], np.arange(92, 184))

    def test_single_year(self):
        yb = year_blocks(summer_dates([2000], 10))
        assert len(yb) == 1
        assert_array_equal(yb.blocks[0], np.arange(10))

    def test_uneven_years(self):
        d = np.r_[summer_dates([2000], 91), summer_dates([2001], 92)]
        yb = year_blocks(d)
        assert_array_equal(yb.sizes, [91, 92])

    @given(sizes=st.lists(st.integers(1, 30), min_size=1, max_size=8))
    def test_sizes_sum_to_t(self, sizes):
        d = np.concatenate([summer_dates([2000 + k], s) for k, s in enumerate(sizes)])
        yb = year_blocks(d)
        assert yb.sizes.sum() == len(d)
        assert_array_equal(yb.sizes, sizes)
        assert_array_equal(np.concatenate(yb.blocks), np.arange(len(d)))
