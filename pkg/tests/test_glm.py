import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import expit

import config
from data_model import DesignMatrix
from errors import ColumnMismatch, InsufficientLevels, RankDeficient, SeparationSuspected
from glm import BINOMIAL, GAUSSIAN, check_rank, fit_multinomial, fit_offset, fit_weighted


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture
def cells(rng):
    """Two binary regressors, every cell populated, Bernoulli response."""
    n = 400
    x1 = rng.integers(0, 2, n).astype(float)
    x2 = rng.integers(0, 2, n).astype(float)
    y = rng.binomial(1, expit(-0.5 + x1 - 0.8 * x2 + 0.6 * x1 * x2)).astype(float)
    design = DesignMatrix(np.column_stack([np.ones(n), x1, x2, x1 * x2]), ("Intercept", "x1", "x2", "x1:x2"))
    return design, x1, x2, y


class TestFitWeighted:
    def test_saturated_fit_reproduces_cell_means(self, cells):
        design, x1, x2, y = cells
        fit = fit_weighted(design, y)
        fitted = fit.predict(design)
        for a in (0, 1):
            for b in (0, 1):
                cell = (x1 == a) & (x2 == b)
                npt.assert_allclose(fitted[cell], y[cell].mean(), atol=1e-8)
        assert fit.converged

    def test_weighted_saturated_fit_reproduces_weighted_means(self, cells, rng):
        design, x1, x2, y = cells
        w = rng.uniform(0.2, 3.0, y.size)
        fitted = fit_weighted(design, y, w).predict(design)
        for a in (0, 1):
            for b in (0, 1):
                cell = (x1 == a) & (x2 == b)
                npt.assert_allclose(fitted[cell], np.average(y[cell], weights=w[cell]), atol=1e-8)

    def test_weight_scale_invariance(self, cells, rng):
        design, _, _, y = cells
        w = rng.uniform(0.2, 3.0, y.size)
        base = fit_weighted(design, y, w)
        scaled = fit_weighted(design, y, 7.5 * w)
        npt.assert_allclose(scaled.coefficients, base.coefficients, atol=1e-9)

    def test_fractional_response(self, cells, rng):
        design, _, _, _ = cells
        y = rng.uniform(0, 1, design.rows)
        fit = fit_weighted(design, y)
        mu = fit.predict(design)
        npt.assert_allclose(design.values.T @ (y - mu), 0.0, atol=1e-7)

    def test_gaussian_matches_least_squares(self, rng):
        n = 50
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ [1.0, -2.0] + rng.normal(scale=0.3, size=n)
        fit = fit_weighted(DesignMatrix(X, ("Intercept", "x")), y, family_link=GAUSSIAN)
        npt.assert_allclose(fit.coefficients, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)

    def test_score_residual_reported(self, cells):
        design, _, _, y = cells
        fit = fit_weighted(design, y)
        assert fit.score_residual <= config.GLM_SCORE_TOL * y.size
        assert set(fit.summary()["coefficients"]) == set(design.column_names)

    def test_zero_weight_rows_are_ignored(self, cells):
        design, _, _, y = cells
        w = np.ones(y.size)
        w[:100] = 0.0
        full = fit_weighted(design, y, w)
        subset = fit_weighted(design.take(np.arange(100, y.size)), y[100:])
        npt.assert_allclose(full.coefficients, subset.coefficients, atol=1e-8)

    def test_rank_deficient_names_columns(self, rng):
        x = rng.normal(size=30)
        design = DesignMatrix(np.column_stack([np.ones(30), x, 2 * x]), ("Intercept", "x", "x2"))
        with pytest.raises(RankDeficient) as info:
            fit_weighted(design, rng.integers(0, 2, 30).astype(float))
        assert info.value.columns
        with pytest.raises(RankDeficient):
            check_rank(design)

    def test_separation_raises_by_default(self):
        x = np.array([-2.0, -1.5, -1.0, 1.0, 1.5, 2.0])
        design = DesignMatrix(np.column_stack([np.ones(6), x]), ("Intercept", "x"))
        assert config.SEPARATION_POLICY == "raise"
        with pytest.raises(SeparationSuspected):
            fit_weighted(design, (x > 0).astype(float))

    def test_separation_can_warn_and_flag(self, monkeypatch):
        x = np.array([-2.0, -1.5, -1.0, 1.0, 1.5, 2.0])
        design = DesignMatrix(np.column_stack([np.ones(6), x]), ("Intercept", "x"))
        monkeypatch.setattr(config, "SEPARATION_POLICY", "warn")
        fit = fit_weighted(design, (x > 0).astype(float))
        assert fit.separation
        assert fit.summary()["separation"]

    def test_column_mismatch(self, cells):
        design, _, _, y = cells
        fit = fit_weighted(design, y)
        other = DesignMatrix(design.values, ("Intercept", "x1", "x2", "x2:x1"))
        with pytest.raises(ColumnMismatch):
            fit.predict(other)


class TestFitOffset:
    def test_intercept_update_solves_score(self, rng):
        off = rng.normal(size=200)
        y = rng.binomial(1, expit(off + 0.4)).astype(float)
        w = rng.uniform(0.5, 2.0, 200)
        d = fit_offset(off, y, w)
        npt.assert_allclose(np.sum(w * (y - expit(off + d))), 0.0, atol=1e-9)

    def test_covariate_update_solves_score(self, rng):
        off = rng.normal(size=200)
        c = rng.normal(size=200)
        y = rng.binomial(1, expit(off + 0.3 * c)).astype(float)
        d = fit_offset(off, y, covariate=c)
        npt.assert_allclose(np.sum(c * (y - expit(off + d * c))), 0.0, atol=1e-9)

    def test_gaussian_is_closed_form(self, rng):
        off = rng.normal(size=40)
        y = off + 1.25
        assert fit_offset(off, y, family_link=GAUSSIAN) == pytest.approx(1.25)

    def test_boundary_response_raises(self, rng):
        off = rng.normal(size=20)
        with pytest.raises(SeparationSuspected):
            fit_offset(off, np.ones(20))

    def test_no_active_rows(self):
        assert fit_offset(np.zeros(3), np.array([0.0, 1.0, 1.0]), np.zeros(3)) == 0.0


class TestMultinomial:
    def test_intercept_only_matches_frequencies(self, rng):
        y = rng.choice([0.0, 1.0, 2.0], size=300, p=[0.5, 0.3, 0.2])
        design = DesignMatrix(np.ones((300, 1)), ("Intercept",))
        fit = fit_multinomial(design, y)
        probs = fit.predict_proba(design)
        npt.assert_allclose(probs[0], [np.mean(y == lv) for lv in (0, 1, 2)], atol=1e-8)
        npt.assert_allclose(probs.sum(axis=1), 1.0)
        assert fit.reference == 0.0

    def test_two_levels_agree_with_binomial(self, cells):
        design, _, _, y = cells
        multi = fit_multinomial(design, y)
        binom = fit_weighted(design, y, family_link=BINOMIAL)
        npt.assert_allclose(multi.predict_proba(design)[:, 1], binom.predict(design), atol=1e-7)

    def test_single_level_raises(self):
        with pytest.raises(InsufficientLevels):
            fit_multinomial(DesignMatrix(np.ones((5, 1)), ("Intercept",)), np.zeros(5))

    def test_weighted_intercept_only_matches_weighted_frequencies(self, rng):
        y = rng.choice([0.0, 1.0, 2.0], size=300, p=[0.4, 0.4, 0.2])
        w = rng.uniform(0.2, 3.0, 300)
        design = DesignMatrix(np.ones((300, 1)), ("Intercept",))
        fit = fit_multinomial(design, y, w)
        expected = [np.sum(w * (y == lv)) / np.sum(w) for lv in (0, 1, 2)]
        npt.assert_allclose(fit.predict_proba(design)[0], expected, atol=1e-8)
        assert fit.weighted

    def test_declared_level_without_rows_raises(self, rng):
        y = rng.choice([0.0, 1.0], size=50)
        with pytest.raises(InsufficientLevels):
            fit_multinomial(DesignMatrix(np.ones((50, 1)), ("Intercept",)), y, levels=(0.0, 1.0, 2.0))
