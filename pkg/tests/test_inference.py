import numpy as np
import numpy.testing as npt
import pytest

from data_model import Dataset
from errors import ConfigError, TooManyFailures
from estimators import estimate_wice, pairwise_specs
from inference import bootstrap_ci, contrast, percentile_interval
from simulation import apply_overrides, binary_model, generate


@pytest.fixture(scope="module")
def data():
    return generate(binary_model(), 400, 31)


@pytest.fixture(scope="module")
def specs(data):
    return pairwise_specs(data.covariate_names)


@pytest.fixture(scope="module")
def main_effects(specs):
    """Working models without interactions: quick, stable fits on small resamples."""
    return apply_overrides(specs, {"outcome": "M + L1 + L2", "projection": "L1 + L2",
                                   "exposure": "L1 + L2", "mediator": "A + L1 + L2"})


class TestPercentileInterval:
    def test_order_statistics(self):
        assert percentile_interval(np.arange(1, 100), 0.95) == pytest.approx((2.5, 97.5))

    def test_narrower_at_lower_level(self):
        values = np.random.default_rng(0).normal(size=500)
        lo95, hi95 = percentile_interval(values, 0.95)
        lo80, hi80 = percentile_interval(values, 0.80)
        assert lo95 <= lo80 < hi80 <= hi95

    def test_rejects_bad_level(self):
        with pytest.raises(ValueError):
            percentile_interval([1.0, 2.0], 1.5)


class TestBootstrap:
    def test_reproducible_for_a_seed(self, data, main_effects):
        first = bootstrap_ci(data, "wice", main_effects, B=20, seed=5)
        second = bootstrap_ci(data, "wice", main_effects, B=20, seed=5)
        npt.assert_array_equal(first.replicates, second.replicates)
        assert first.ci == second.ci

    def test_worker_count_does_not_matter(self, data, main_effects):
        serial = bootstrap_ci(data, "ice", main_effects, B=12, seed=8, workers=1)
        parallel = bootstrap_ci(data, "ice", main_effects, B=12, seed=8, workers=2)
        npt.assert_array_equal(serial.replicates, parallel.replicates)

    def test_constant_outcome_gives_zero_width(self, data, specs):
        constant = data.with_outcome(np.ones(data.n))
        result = bootstrap_ci(constant, "wice", specs, B=10, seed=1)
        assert result.ci == (1.0, 1.0)
        assert result.se == 0.0

    def test_needs_two_resamples(self, data, specs):
        with pytest.raises(ConfigError):
            bootstrap_ci(data, "wice", specs, B=1)

    def test_too_many_failures(self):
        # a single treated row: about a third of the resamples miss it
        tiny = Dataset(np.zeros((6, 1)), [1, 0, 0, 0, 0, 0], [0, 1, 0, 1, 0, 1], np.ones(6), 1, (0,), ("L1",))
        with pytest.raises(TooManyFailures) as info:
            bootstrap_ci(tiny, "wice", pairwise_specs(("L1",)), B=40, seed=2)
        assert info.value.total == 40

    def test_to_dict(self, data, specs):
        result = bootstrap_ci(data.with_outcome(np.zeros(data.n)), "ice", specs, B=5, seed=1)
        assert set(result.to_dict()) == {"kind", "point", "ci", "level", "bootstrap_se", "B", "failed"}


class TestContrast:
    def test_equal_levels_give_zero(self, data, main_effects):
        result = contrast(data, "wice", main_effects, "psi-diff", B=5, seed=3, levels=(1.0, 1.0))
        assert result.point == 0.0
        npt.assert_array_equal(result.replicates, 0.0)

    def test_mean_minus_psi_point(self, data, main_effects):
        result = contrast(data, "wice", main_effects, "ey-minus-psi", B=5, seed=3)
        expected = float(np.mean(data.outcome)) - estimate_wice(data, main_effects).psi_hat
        assert result.point == pytest.approx(expected, abs=1e-12)
        assert result.kind == "ey-minus-psi"

    def test_unknown_kind(self, data, specs):
        with pytest.raises(ConfigError):
            contrast(data, "wice", specs, "ratio", B=5)
