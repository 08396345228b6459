import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from margsens.data import CovariateTable
from margsens.errors import BasisError
from margsens.smooth import (
    build_basis,
    default_bases,
    fit_location_scale,
    fit_site_trend,
    penalized_nll,
    residuals,
)

N_YEARS, SEASON = 31, 92


def paper_covariates(n_years=N_YEARS, gmt_range=(-0.5, 0.5)):
    dates = np.concatenate(
        [np.datetime64(f"{1990 + k}-06-01") + np.arange(SEASON) for k in range(n_years)]
    )
    gmt = np.repeat(np.linspace(*gmt_range, n_years), SEASON)
    return CovariateTable.from_dates(dates, gmt)


@pytest.fixture(scope="module")
def cov():
    return paper_covariates()


class TestBasis:
    def test_day_full_rank(self):
        b = build_basis(np.arange(1, 93), "cubic_regression", 92)
        assert b.design.shape == (92, 92)
        assert np.linalg.matrix_rank(b.design) == 92

    def test_interpolating_three(self):
        b = build_basis([1.0, 2.0, 3.0], "cubic_regression", 3)
        assert_allclose(b.design, np.eye(3), atol=1e-14)
        assert np.linalg.matrix_rank(b.penalty, tol=1e-10) == 1

    def test_constant_covariate(self):
        with pytest.raises(BasisError):
            build_basis(np.full(50, 2.0), "thin_plate_1d", 3)

    def test_dim_bounds(self):
        with pytest.raises(BasisError):
            build_basis(np.arange(5.0), "cubic_regression", 6)
        with pytest.raises(BasisError):
            build_basis(np.arange(5.0), "cubic_regression", 2)
        with pytest.raises(BasisError):
            build_basis(np.arange(5.0), "bogus", 3)

    def test_penalty_psd_and_kills_lines(self):
        x = np.linspace(0, 3, 200)
        b = build_basis(x, "thin_plate_1d", 10)
        assert_allclose(b.penalty, b.penalty.T)
        assert np.linalg.eigvalsh(b.penalty).min() > -1e-9
        # a straight line has zero curvature
        line = 2.0 + 0.5 * b.knots
        assert abs(line @ b.penalty @ line) < 1e-9
        # exact curvature of the spline through x^2 is 4 * (range) = 12
        quad = b.knots**2
        assert quad @ b.penalty @ quad < 12.0 + 1e-9

    def test_penalty_matches_quadrature(self):
        from scipy.interpolate import CubicSpline

        knots = np.array([0.0, 0.4, 1.1, 2.0, 2.2, 3.5])
        b = build_basis(knots, "cubic_regression", 6)
        c = np.random.default_rng(0).normal(size=6)
        cs = CubicSpline(knots, c, bc_type="natural")
        xs = np.linspace(0, 3.5, 200001)
        oracle = np.trapezoid(cs(xs, 2) ** 2, xs)
        assert_allclose(c @ b.penalty @ c, oracle, rtol=1e-6)

    def test_natural_extrapolation_linear(self):
        b = build_basis(np.linspace(0, 1, 30), "cubic_regression", 5)
        out = b.evaluate([1.0, 2.0, 3.0]) @ np.arange(5.0)
        assert_allclose(out[2] - out[1], out[1] - out[0], rtol=1e-10)


class TestFit:
    def test_sinusoid_in_day(self, cov):
        rng = np.random.default_rng(11)
        wave = np.sin(2 * np.pi * cov.day_index / SEASON)
        y = wave + rng.normal(0, 0.1, len(wave))
        fit = fit_site_trend(y, cov)
        explained = 1 - np.var(fit.mu_hat - wave) / np.var(wave)
        assert explained >= 0.99
        r = residuals(y, fit)
        assert 0.9 <= r.std() <= 1.1

    def test_linear_gmt_slope(self, cov):
        rng = np.random.default_rng(12)
        y = 5 + 2 * cov.gmt + rng.normal(0, 1, len(cov.gmt))
        fit = fit_site_trend(y, cov)
        g = np.linspace(cov.gmt.min(), cov.gmt.max(), 50)
        mu, _ = fit.predict(g, np.full(50, 46))
        slope = np.polyfit(g, mu, 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_heavy_smoothing_null_limit(self, cov):
        rng = np.random.default_rng(13)
        y = 3 + rng.normal(0, 1.5, len(cov.gmt))
        heavy = dict(mu_gmt=1e8, mu_day=1e8, sigma_gmt=1e8, sigma_day=1e8)
        fit = fit_site_trend(y, cov, smoothing=heavy)
        # linear terms sit in the penalty null space, so compare levels
        assert_allclose(fit.mu_hat, y.mean(), rtol=0.02)
        assert_allclose(np.exp(np.mean(np.log(fit.sigma_hat))), y.std(), rtol=0.02)
        assert np.ptp(fit.sigma_hat) / y.std() < 0.2

    def test_penalised_optimum(self, cov):
        rng = np.random.default_rng(14)
        y = 1 + cov.gmt + 0.5 * np.cos(2 * np.pi * cov.day_index / SEASON)
        y = y + np.exp(0.2 * cov.gmt) * rng.normal(size=len(y))
        fit = fit_site_trend(y, cov)
        assert fit.converged
        p = len(fit.coef_mu)
        # nesting: the constant-mean / constant-sd fit is reachable
        b0, g0 = np.zeros(p), np.zeros(p)
        b0[0], g0[0] = y.mean(), np.log(y.std())
        assert fit.nll <= penalized_nll(y, fit, b0, g0)
        theta = np.r_[fit.coef_mu, fit.coef_logsigma]
        grad = np.empty_like(theta)
        h = 1e-5
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = h
            up = penalized_nll(y, fit, *np.split(theta + e, [p]))
            dn = penalized_nll(y, fit, *np.split(theta - e, [p]))
            grad[i] = (up - dn) / (2 * h)
        assert np.linalg.norm(grad) < 1e-3 * abs(fit.nll)
        assert np.all(fit.sigma_hat > 0)

    def test_to_dict_round_trip(self, cov):
        import json

        y = np.random.default_rng(15).normal(size=len(cov.gmt))
        fit = fit_site_trend(y, cov, gmt_dim=5, day_dim=10)
        d = json.loads(json.dumps(fit.to_dict()))
        assert len(d["coef_mu"]) == len(fit.coef_mu)
        assert set(d["smoothing"]) == {"mu_gmt", "mu_day", "sigma_gmt", "sigma_day"}
        assert len(d["knots"]["day"]) == 10


class TestResiduals:
    def test_exact_mean_gives_zero(self, cov):
        y = np.random.default_rng(16).normal(size=len(cov.gmt))
        fit = fit_site_trend(y, cov, gmt_dim=5, day_dim=20)
        assert_allclose(residuals(fit.mu_hat, fit), 0.0, atol=0)

    def test_reconstruction(self, cov):
        y = np.random.default_rng(17).gamma(2.0, size=len(cov.gmt))
        fit = fit_site_trend(y, cov, gmt_dim=5, day_dim=20)
        r = residuals(y, fit)
        assert_allclose(fit.mu_hat + fit.sigma_hat * r, y, atol=1e-10)

    def test_gaussian_well_fit(self, cov):
        rng = np.random.default_rng(18)
        mu = 20 + 1.5 * cov.gmt + 2 * np.sin(np.pi * cov.day_index / SEASON)
        sig = 2 * np.exp(0.3 * cov.gmt)
        y = mu + sig * rng.normal(size=len(mu))
        r = residuals(y, fit_site_trend(y, cov))
        assert len(r) == 2852
        assert -0.1 <= r.mean() <= 0.1
        assert 0.9 <= r.std() <= 1.1
        assert abs(stats.skew(r)) < 0.1

    @settings(max_examples=6, deadline=None)
    @given(a=st.floats(-50, 50), b=st.floats(0.01, 100))
    def test_affine_invariance(self, cov, a, b):
        rng = np.random.default_rng(19)
        y = 10 + cov.gmt + np.cos(2 * np.pi * cov.day_index / SEASON) + rng.normal(size=2852)
        gb, db = default_bases(cov, 6, 30)
        r1 = residuals(y, fit_location_scale(y, gb, db))
        y2 = a + b * y
        r2 = residuals(y2, fit_location_scale(y2, gb, db))
        assert_allclose(r2, r1, atol=1e-3)
