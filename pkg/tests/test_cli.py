import json
import os

import numpy as np
import pytest

import config
from cli import main
from data_model import save_csv
from simulation import cohort_model, generate

COHORT_FLAGS = ["--covariates", "age", "female", "smoker", "--exposure", "condition",
                "--mediator", "treatment", "--outcome", "mortality"]


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "cohort.csv")
    save_csv(generate(cohort_model(), 2000, 17), path)
    return path


def read(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class TestEstimate:
    def test_writes_report(self, cohort_csv, tmp_path, capsys):
        out = str(tmp_path / "wice.json")
        code = main(["estimate", "--data", cohort_csv, *COHORT_FLAGS, "--estimator", "wice", "--out", out])
        assert code == config.EXIT_OK
        report = read(out)
        assert report["estimator"] == "wice"
        assert 0.0 <= report["psi_hat"] <= 1.0
        assert report["within_bounds"]
        assert report["config"]["exposure"] == "condition"
        assert set(report["provenance"]) == {"version", "config_sha1", "git_commit"}
        assert "psi=" in capsys.readouterr().out

    def test_flags_override_config_file(self, cohort_csv, tmp_path):
        cfg = tmp_path / "estimate.json"
        cfg.write_text(json.dumps({"data": cohort_csv, "covariates": ["age", "female", "smoker"],
                                   "exposure": "condition", "mediator": "treatment", "outcome": "mortality",
                                   "estimator": "ice", "models": {"projection": "age + smoker"}}))
        out = str(tmp_path / "report.json")
        code = main(["estimate", "--config", str(cfg), "--estimator", "wice", "--b0", "M + age", "--out", out])
        assert code == config.EXIT_OK
        report = read(out)
        assert report["estimator"] == "wice"
        assert report["specs"]["outcome"] == "1 + M + age"
        assert report["specs"]["projection"] == "1 + age + smoker"

    def test_bootstrap_and_contrast(self, cohort_csv, tmp_path):
        out = str(tmp_path / "boot.json")
        code = main(["estimate", "--data", cohort_csv, *COHORT_FLAGS, "--b0", "M + age + smoker",
                     "--projection", "age + smoker", "--bootstrap", "8", "--contrast", "ey-minus-psi",
                     "--seed", "4", "--out", out])
        assert code == config.EXIT_OK
        report = read(out)
        assert report["bootstrap"]["B"] == 8
        assert report["contrast"]["kind"] == "ey-minus-psi"

    def test_ice_reports_no_standard_error(self, cohort_csv, tmp_path, capsys):
        out = str(tmp_path / "ice.json")
        assert main(["estimate", "--data", cohort_csv, *COHORT_FLAGS, "--estimator", "ice", "--out", out]) == config.EXIT_OK
        report = read(out)
        assert report["variance"] is None
        assert report["ci"] is None
        assert "se=n/a" in capsys.readouterr().out

    def test_continuous_mediator_with_aipw(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        path = tmp_path / "continuous.csv"
        rows = ["L1,A,M,Y"] + [f"{rng.normal():.6f},{a},{rng.normal() + a:.6f},{rng.integers(0, 2)}"
                               for a in rng.integers(0, 2, 200)]
        path.write_text("\n".join(rows) + "\n")
        code = main(["estimate", "--data", str(path), "--covariates", "L1", "--estimator", "aipw",
                     "--out", str(tmp_path / "aipw.json")])
        assert code == config.EXIT_ESTIMATION
        assert "UnsupportedMediator" in capsys.readouterr().err

    def test_unknown_config_key(self, cohort_csv, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"data": cohort_csv, "estimatr": "wice"}))
        assert main(["estimate", "--config", str(cfg)]) == config.EXIT_CONFIG

    def test_missing_data_setting(self):
        assert main(["estimate", "--estimator", "wice"]) == config.EXIT_CONFIG

    def test_missing_column(self, cohort_csv, tmp_path):
        code = main(["estimate", "--data", cohort_csv, "--covariates", "bmi", "--exposure", "condition",
                     "--mediator", "treatment", "--outcome", "mortality", "--out", str(tmp_path / "x.json")])
        assert code == config.EXIT_DATA

    def test_unreadable_file(self, tmp_path):
        code = main(["estimate", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "x.json")])
        assert code == config.EXIT_DATA


class TestOracle:
    def test_identified_model(self, tmp_path):
        out = str(tmp_path / "oracle.json")
        assert main(["oracle", "--model", "binary", "--out", out]) == config.EXIT_OK
        result = read(out)
        assert result["gap"] <= config.ORACLE_GAP_TOL
        assert result["frontdoor"] == pytest.approx(result["interventional_mean"], abs=1e-12)

    def test_violated_model_reports_gap(self):
        assert main(["oracle", "--model", "dismissibility_violation"]) == config.EXIT_GAP

    def test_continuous_model_uses_monte_carlo(self, tmp_path):
        out = str(tmp_path / "mc.json")
        assert main(["oracle", "--model", "rare_outcome", "--draws", "20000", "--out", out]) == config.EXIT_OK
        result = read(out)
        assert result["frontdoor"] is None
        assert 0.0 <= result["interventional_mean"] <= 1.0

    def test_unknown_model(self):
        assert main(["oracle", "--model", "no_such_model"]) == config.EXIT_CONFIG


class TestSimulate:
    def test_smoke_run(self, tmp_path):
        cfg = tmp_path / "study.json"
        cfg.write_text(json.dumps({"model": "no_covariate", "scenarios": [1], "estimators": ["wice", "ice"],
                                   "sample_sizes": [100], "replications": 2}))
        out_dir = str(tmp_path / "results")
        assert main(["simulate", "--config", str(cfg), "--seed", "3", "--out", out_dir]) == config.EXIT_OK
        assert os.path.exists(os.path.join(out_dir, "metrics.csv"))
        written = read(os.path.join(out_dir, "metrics.json"))
        assert written["config"]["seed"] == 3
        assert [row["estimator"] for row in written["rows"]] == ["wice", "ice"]

    def test_invalid_study(self, tmp_path):
        cfg = tmp_path / "study.json"
        cfg.write_text(json.dumps({"model": "binary", "scenarios": [9]}))
        assert main(["simulate", "--config", str(cfg)]) == config.EXIT_CONFIG
