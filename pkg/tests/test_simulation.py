import json
import math

import numpy as np
import pandas as pd
import pytest

import config
import utils
from eif import WeightForm
from errors import ConfigError
from estimators import pairwise_specs, run_estimator
from oracle import Equation, StructuralModel
from simulation import (
    SCENARIO_IDS,
    ReplicationRecord,
    ScenarioSpec,
    apply_overrides,
    binary_model,
    build_study,
    generate,
    metrics_frame,
    no_covariate_model,
    rare_outcome_model,
    resolve_model,
    run_study,
    scenario_specs,
    summarize,
    true_value,
    write_metrics,
)


def separated_model() -> StructuralModel:
    """The outcome copies the mediator, so any outcome regression on M is separated."""
    return StructuralModel(
        (
            Equation("A", terms=(("1", 0.0),), role="exposure"),
            Equation("M", terms=(("1", -0.5), ("A", 1.0)), role="mediator"),
            Equation("Y", terms=(("1", -40.0), ("M", 80.0)), role="outcome"),
        ),
        name="separated",
    )


class TestGenerate:
    def test_latent_variables_are_dropped(self):
        data = generate(rare_outcome_model(), 200, 1)
        assert data.covariate_names == ("L1", "L2")
        assert data.n == 200
        assert data.arm_treated == 1.0 and data.arm_control == (0.0,)

    def test_same_stream_same_rows(self):
        first = generate(binary_model(), 300, utils.rng_stream(9, 300, 4))
        second = generate(binary_model(), 300, utils.rng_stream(9, 300, 4))
        assert first.equals(second)
        assert not first.equals(generate(binary_model(), 300, utils.rng_stream(9, 300, 5)))

    def test_no_covariates(self):
        data = generate(no_covariate_model(), 50, 2)
        assert not data.has_covariates


class TestScenarios:
    def test_scenario_one_is_pairwise_with_family_override(self):
        model = rare_outcome_model()
        specs = scenario_specs(model, 1)
        base = pairwise_specs(model.covariates)
        assert specs.outcome.formula == base.outcome.formula
        assert [t.label for t in specs.mediator.terms] == ["A", "L1", "L2", "L1:L2"]

    def test_scenario_four_misspecifies_outcome_and_projection(self):
        specs = scenario_specs(rare_outcome_model(), 4)
        assert [t.label for t in specs.outcome.terms] == ["M", "L1", "L2"]
        assert [t.label for t in specs.projection.terms] == ["(1-L1):L2"]

    @pytest.mark.parametrize("family", ["rare_outcome", "binary"])
    @pytest.mark.parametrize("scenario", [2, 3])
    def test_wrong_mediator_model_also_breaks_propensity_weights(self, family, scenario):
        model = rare_outcome_model() if family == "rare_outcome" else binary_model()
        correct = scenario_specs(model, 1, weight_form=WeightForm.PROPENSITY.value)
        specs = scenario_specs(model, scenario, weight_form=WeightForm.PROPENSITY.value)
        assert specs.mediator.formula != correct.mediator.formula
        assert [t.label for t in specs.exposure_mediator.terms] == ["M", "L2"]
        assert specs.outcome.formula == correct.outcome.formula

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            scenario_specs(binary_model(), 7)

    def test_model_without_family(self):
        assert scenario_specs(no_covariate_model(), 1).projection is not None
        with pytest.raises(ConfigError):
            scenario_specs(no_covariate_model(), 2)

    def test_override_keys_checked(self):
        with pytest.raises(ConfigError):
            apply_overrides(pairwise_specs(("L1",)), {"propensity": "L1"})

    def test_invalid_scenario_spec(self):
        specs = pairwise_specs(("L1",))
        with pytest.raises(ConfigError):
            ScenarioSpec(1, specs, estimators=("wice", "magic"))
        with pytest.raises(ConfigError):
            ScenarioSpec(1, specs, replications=0)
        with pytest.raises(ConfigError):
            ScenarioSpec(1, specs, sample_sizes=())


class TestSummarize:
    def test_moments(self):
        records = [ReplicationRecord(1, "wice", 100, r, psi_hat=v, covered=c)
                   for r, (v, c) in enumerate([(0.1, True), (0.3, False), (0.2, True)])]
        row = summarize("wice", 100, 1, records, truth=0.15)
        assert row.mean_estimate == pytest.approx(0.2)
        assert row.bias_x100 == pytest.approx(5.0)
        assert row.se_x100 == pytest.approx(10.0)
        assert row.standardized_bias == pytest.approx(50.0)
        assert row.coverage == pytest.approx(2 / 3)
        assert not row.sd_degenerate

    def test_failures_are_counted_not_averaged(self):
        records = [ReplicationRecord(1, "tmle", 100, 0, psi_hat=0.4),
                   ReplicationRecord(1, "tmle", 100, 1, psi_hat=0.6),
                   ReplicationRecord(1, "tmle", 100, 2, error="FluctuationNonConvergence")]
        row = summarize("tmle", 100, 1, records, truth=0.5)
        assert row.failed == 1
        assert row.replications == 3
        assert row.mean_estimate == pytest.approx(0.5)

    def test_zero_spread_sentinel(self):
        records = [ReplicationRecord(1, "ice", 100, r, psi_hat=0.25) for r in range(4)]
        row = summarize("ice", 100, 1, records, truth=0.2)
        assert row.sd_degenerate
        assert math.isnan(row.standardized_bias)
        assert row.se_x100 == 0.0

    def test_single_replication(self):
        row = summarize("ice", 100, 1, [ReplicationRecord(1, "ice", 100, 0, psi_hat=0.3)], truth=0.2)
        assert row.sd_degenerate

    def test_mean_model_se(self):
        records = [ReplicationRecord(1, "wice", 100, 0, psi_hat=0.2, se=0.01),
                   ReplicationRecord(1, "wice", 100, 1, psi_hat=0.3, se=0.03),
                   ReplicationRecord(1, "ice", 100, 2, psi_hat=0.3)]
        assert summarize("wice", 100, 1, records[:2], truth=0.25).model_se_x100 == pytest.approx(2.0)
        assert summarize("ice", 100, 1, records[2:], truth=0.25).model_se_x100 is None

    def test_out_of_bounds_counted(self):
        records = [ReplicationRecord(1, "aipw", 100, 0, psi_hat=-0.01, within_bounds=False),
                   ReplicationRecord(1, "aipw", 100, 1, psi_hat=0.02)]
        assert summarize("aipw", 100, 1, records, truth=0.0).out_of_bounds == 1


class TestStudy:
    @pytest.fixture
    def payload(self):
        return {"model": "binary", "sample_sizes": [150], "replications": 3, "seed": 11,
                "estimators": ["wice", "ice"], "scenarios": [1, 3]}

    def test_identical_across_worker_counts(self, payload):
        study = build_study(payload)
        serial = run_study(study.model, study.scenarios, study.truth, workers=1)
        parallel = run_study(study.model, study.scenarios, study.truth, workers=2)
        pd.testing.assert_frame_equal(metrics_frame(serial), metrics_frame(parallel))
        assert len(serial) == 4

    def test_exact_truth_for_discrete_model(self, payload):
        study = build_study(payload)
        assert study.truth == pytest.approx(true_value(binary_model(), "exact"))
        assert study.settings["resolved_truth"] == study.truth

    def test_overrides_from_arguments(self, payload):
        study = build_study(payload, replications=1, sample_sizes=[120, 140], workers=1, seed=5)
        assert study.scenarios[0].sample_sizes == (120, 140)
        assert study.scenarios[0].replications == 1
        assert study.scenarios[0].base_seed == 5

    def test_custom_scenario_entry(self, payload):
        payload["scenarios"] = [{"id": 5, "label": "no interaction in b0", "base": 1, "specs": {"outcome": "M + L1 + L2"}}]
        study = build_study(payload)
        assert study.scenarios[0].scenario_id == 5
        assert [t.label for t in study.scenarios[0].specs.outcome.terms] == ["M", "L1", "L2"]

    def test_unknown_key(self, payload):
        payload["replicates"] = 10
        with pytest.raises(ConfigError):
            build_study(payload)

    def test_unknown_model(self, payload):
        payload["model"] = "no_such_model"
        with pytest.raises(ConfigError):
            build_study(payload)

    def test_separated_replications_are_counted_as_failed(self, monkeypatch):
        model = separated_model()
        scenarios = [ScenarioSpec(1, scenario_specs(model, 1), estimators=("ice",), sample_sizes=(200,),
                                  replications=3, base_seed=2)]
        row = run_study(model, scenarios, truth=0.5, workers=1)[0]
        assert row.failed == 3
        assert math.isnan(row.mean_estimate)
        monkeypatch.setattr(config, "SEPARATION_POLICY", "warn")
        row = run_study(model, scenarios, truth=0.5, workers=1)[0]
        assert row.failed == 0
        assert 0.0 <= row.mean_estimate <= 1.0

    def test_write_metrics(self, payload, tmp_path):
        study = build_study(payload)
        rows = run_study(study.model, study.scenarios, study.truth)
        csv_path, json_path = write_metrics(rows, str(tmp_path), study.settings)
        frame = pd.read_csv(csv_path)
        assert list(frame["estimator"]) == ["wice", "ice", "wice", "ice"]
        with open(json_path, encoding="utf-8") as f:
            written = json.load(f)
        assert set(written) == {"provenance", "config", "rows"}
        assert written["provenance"]["config_sha1"] == utils.provenance(study.settings)["config_sha1"]

    def test_resolve_model_from_file(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(binary_model().to_dict()))
        assert resolve_model(str(path)).name == "binary"
        assert np.isclose(true_value(resolve_model(str(path))), true_value(binary_model()))


@pytest.mark.slow
class TestRareOutcomeStudy:
    """Long reproductions on the rare-outcome mechanism; truth from the 10^7-draw reference."""

    truth = config.RARE_OUTCOME_TRUTH

    def _rows(self, scenario_ids, estimators, n, replications, seed=7):
        model = rare_outcome_model()
        scenarios = [ScenarioSpec(s, scenario_specs(model, s), estimators=estimators, sample_sizes=(n,),
                                  replications=replications, base_seed=seed) for s in scenario_ids]
        return {(r.estimator, r.scenario): r for r in run_study(model, scenarios, self.truth, workers=4)}

    def test_weighted_ice_is_nearly_unbiased_at_500(self):
        rows = self._rows((1, 2, 3, 4), ("wice", "ipw"), 500, 200)
        for s in (1, 2, 3, 4):
            row = rows[("wice", s)]
            assert abs(row.bias_x100) <= 0.1 + 3 * row.se_x100 / np.sqrt(200)
            assert row.out_of_bounds == 0
        ipw = rows[("ipw", 4)]
        assert ipw.bias_x100 > 1.0

    def test_tmle_is_nearly_unbiased_at_500(self):
        row = self._rows((1,), ("tmle",), 500, 200)[("tmle", 1)]
        assert abs(row.bias_x100) <= 0.2
        assert row.out_of_bounds == 0

    def test_ice_is_biased_under_a_wrong_projection(self):
        rows = self._rows((3,), ("wice", "ice"), 500, 200)
        ice = rows[("ice", 3)]
        assert abs(ice.bias_x100 + 0.45) <= 0.2
        assert abs(rows[("wice", 3)].bias_x100) < abs(ice.bias_x100)

    def test_aipw_leaves_the_sample_range(self):
        rows = self._rows((1,), ("wice", "aipw"), 100, 1000, seed=13)
        assert rows[("wice", 1)].out_of_bounds == 0
        aipw = rows[("aipw", 1)]
        assert aipw.out_of_bounds >= 0.02 * (aipw.replications - aipw.failed)

    def test_sandwich_se_tracks_the_empirical_sd(self):
        row = self._rows((1,), ("wice",), 500, 200)[("wice", 1)]
        assert row.model_se_x100 == pytest.approx(row.se_x100, rel=0.2)

    def test_sandwich_coverage(self):
        row = self._rows((1,), ("wice",), 2000, 500, seed=31)[("wice", 1)]
        assert 0.92 <= row.coverage <= 0.98


@pytest.mark.slow
class TestTripleRobustness:
    @pytest.mark.parametrize("form", list(WeightForm))
    @pytest.mark.parametrize("scenario", SCENARIO_IDS)
    @pytest.mark.parametrize("make_model", [rare_outcome_model, binary_model])
    def test_one_wrong_part_is_absorbed(self, make_model, scenario, form):
        model = make_model()
        truth = config.RARE_OUTCOME_TRUTH if model.name == "rare_outcome" else true_value(model)
        data = generate(model, 20_000, utils.rng_stream(29, 20_000))
        report = run_estimator("wice", data, scenario_specs(model, scenario, weight_form=form.value))
        assert abs(report.psi_hat - truth) <= 3 * report.se

    @pytest.mark.parametrize("estimator", ["aipw", "itmle"])
    def test_binary_model_with_wrong_outcome_and_projection(self, estimator):
        model = binary_model()
        scenario = ScenarioSpec(4, scenario_specs(model, 4), estimators=(estimator,), sample_sizes=(500,),
                                replications=200, base_seed=17)
        row = run_study(model, [scenario], true_value(model), workers=4)[0]
        assert abs(row.bias_x100) <= 0.15
