"""Replication studies: structural models, misspecification scenarios and metrics.

A study draws one dataset per (sample size, replication) from the stream
(base seed, n, replication), runs every scenario's estimators on it and
aggregates bias, empirical SE, standardized bias, out-of-bounds counts and
Wald coverage per (estimator, n, scenario).
"""

import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.special import logit

import config
import utils
from data_model import Dataset
from eif import WeightForm
from errors import ConfigError, FrontdoorError
from estimators import ESTIMATORS, NuisanceSpecs, pairwise_specs, run_estimator
from oracle import Equation, StructuralModel, interventional_mean_exact, interventional_mean_mc, load_model

# ---------- Logging ----------
logger = utils.get_logger(__name__)

SCENARIO_IDS = (1, 2, 3, 4)
DEFAULT_ESTIMATORS = ("wice", "aipw", "ice", "ipw")


# ---------- Builtin structural models ----------
def rare_outcome_model() -> StructuralModel:
    """Continuous L1, binary L2, rare binary outcome; intervened mean is about 0.0144."""
    return StructuralModel(
        (
            Equation("U", "bernoulli", "expit", (("1", 0.0),), role="latent"),
            Equation("L1", "normal", "identity", (("1", 0.0),), sd=1.0, role="covariate"),
            Equation("L2", "bernoulli", "expit", (("1", 1.0), ("L1", 2.0)), role="covariate"),
            Equation("A", "bernoulli", "expit",
                     (("1", -1.0), ("L1", -3.0), ("L2", 1.0), ("L1:L2", 5.0), ("U", 2.0)), role="exposure"),
            Equation("M", "bernoulli", "expit",
                     (("1", 1.0), ("A", -1.0), ("L1", -2.0), ("L2", 2.0), ("L1:L2", 3.0)), role="mediator"),
            Equation("Y", "bernoulli", "expit",
                     (("1", -4.0), ("A", 2.0), ("M", 1.0), ("A:M", -2.0), ("L1", 2.0), ("L2", -2.0),
                      ("L1:L2", -5.0), ("U", -1.0)), role="outcome"),
        ),
        name="rare_outcome",
    )


def _binary_equations(mediator_confounded: bool) -> Tuple[Equation, ...]:
    mediator_terms: Tuple[Tuple[str, float], ...] = (
        ("1", 1.0), ("A", 1.0), ("L1", -3.0), ("L2", 2.0), ("L1:L2", -5.0))
    if mediator_confounded:
        mediator_terms = mediator_terms + (("U", 2.0),)
    return (
        Equation("U", "bernoulli", "expit", (("1", float(logit(0.3))),), role="latent"),
        Equation("L1", "bernoulli", "expit", (("1", float(logit(0.6))),), role="covariate"),
        Equation("L2", "bernoulli", "expit", (("1", 1.0), ("L1", 4.0)), role="covariate"),
        Equation("A", "bernoulli", "expit",
                 (("1", -1.0), ("L1", 1.0), ("L2", 2.0), ("L1:L2", 5.0), ("U", 1.0)), role="exposure"),
        Equation("M", "bernoulli", "expit", mediator_terms, role="mediator"),
        Equation("Y", "bernoulli", "expit",
                 (("1", -2.25), ("A", 2.0), ("M", -5.0), ("A:M", -2.0), ("L1", 2.0), ("L2", -2.0),
                  ("L1:L2", -5.0), ("U", 1.0)), role="outcome"),
    )


def binary_model() -> StructuralModel:
    """All-binary mechanism; enumerable, so its truth is exact."""
    return StructuralModel(_binary_equations(False), name="binary")


def dismissibility_violation_model() -> StructuralModel:
    """``binary_model`` with U also driving M: the frontdoor formula no longer equals the intervened mean."""
    return StructuralModel(_binary_equations(True), name="dismissibility_violation")


def no_covariate_model() -> StructuralModel:
    return StructuralModel(
        (
            Equation("U", "bernoulli", "expit", (("1", 0.0),), role="latent"),
            Equation("A", "bernoulli", "expit", (("1", -0.5), ("U", 1.5)), role="exposure"),
            Equation("M", "bernoulli", "expit", (("1", -1.0), ("A", 2.0)), role="mediator"),
            Equation("Y", "bernoulli", "expit",
                     (("1", -1.5), ("A", 1.0), ("M", 1.2), ("A:M", -0.8), ("U", 1.5)), role="outcome"),
        ),
        name="no_covariate",
    )


def multilevel_model() -> StructuralModel:
    """Three-level exposure A = A1 + A1*A2 in {0, 1, 2}, built from two latent binary draws."""
    return StructuralModel(
        (
            Equation("U", "bernoulli", "expit", (("1", -0.4),), role="latent"),
            Equation("L1", "bernoulli", "expit", (("1", 0.0),), role="covariate"),
            Equation("A1", "bernoulli", "expit", (("1", 0.3), ("L1", 0.8), ("U", 1.0)), role="latent"),
            Equation("A2", "bernoulli", "expit", (("1", 0.0), ("L1", -0.6), ("U", 0.8)), role="latent"),
            Equation("A", "constant", "identity", (("A1", 1.0), ("A1:A2", 1.0)), role="exposure"),
            Equation("M", "bernoulli", "expit", (("1", -0.5), ("A", 0.9), ("L1", -0.7)), role="mediator"),
            Equation("Y", "bernoulli", "expit",
                     (("1", -1.0), ("A", 0.4), ("M", 1.1), ("L1", -0.5), ("U", 1.2)), role="outcome"),
        ),
        name="multilevel",
    )


def cohort_model() -> StructuralModel:
    """Synthetic cohort: chronic condition (A), its treatment (M), mortality (Y), mixed covariates."""
    return StructuralModel(
        (
            Equation("age", "normal", "identity", (("1", 0.0),), sd=1.0, role="covariate"),
            Equation("female", "bernoulli", "expit", (("1", 0.0),), role="covariate"),
            Equation("smoker", "bernoulli", "expit", (("1", -1.0), ("age", 0.3), ("female", -0.4)),
                     role="covariate"),
            Equation("U", "bernoulli", "expit", (("1", -0.5),), role="latent"),
            Equation("condition", "bernoulli", "expit",
                     (("1", -1.5), ("age", 0.8), ("smoker", 0.6), ("U", 1.0)), role="exposure"),
            Equation("treatment", "bernoulli", "expit",
                     (("1", -2.0), ("condition", 3.5), ("age", 0.3), ("female", -0.2)), role="mediator"),
            Equation("mortality", "bernoulli", "expit",
                     (("1", -3.5), ("condition", 0.7), ("treatment", -0.9), ("age", 0.9), ("smoker", 0.5),
                      ("U", 0.8)), role="outcome"),
        ),
        name="cohort",
    )


BUILTIN_MODELS: Dict[str, Callable[[], StructuralModel]] = {
    "rare_outcome": rare_outcome_model,
    "binary": binary_model,
    "dismissibility_violation": dismissibility_violation_model,
    "no_covariate": no_covariate_model,
    "multilevel": multilevel_model,
    "cohort": cohort_model,
}


def resolve_model(name_or_path: str) -> StructuralModel:
    """Builtin model by name, otherwise a model JSON file."""
    if name_or_path in BUILTIN_MODELS:
        return BUILTIN_MODELS[name_or_path]()
    if not os.path.exists(name_or_path):
        raise ConfigError(f"'{name_or_path}' is neither a builtin model {sorted(BUILTIN_MODELS)} nor a file")
    return load_model(name_or_path)


# ---------- Data generation ----------
def generate(model: StructuralModel, n: int, seed: Union[int, np.random.Generator],
             treated: float = 1.0, control: Optional[Sequence[float]] = None) -> Dataset:
    """``n`` iid rows of the observed variables; latent variables are dropped."""
    rng = seed if isinstance(seed, np.random.Generator) else utils.rng_stream(seed)
    frame = model.sample(n, rng)
    levels = model.exposure_levels() or tuple(sorted(set(frame[model.exposure].tolist())))
    covariates = list(model.covariates)
    return Dataset(
        covariates=frame[covariates].to_numpy(dtype=float).reshape(n, -1) if covariates else np.empty((n, 0)),
        exposure=frame[model.exposure].to_numpy(dtype=float),
        mediator=frame[model.mediator].to_numpy(dtype=float),
        outcome=frame[model.outcome].to_numpy(dtype=float),
        arm_treated=treated,
        arm_control=tuple(control) if control is not None else (),
        covariate_names=tuple(covariates),
        exposure_levels=levels,
        exposure_name=model.exposure,
        mediator_name=model.mediator,
        outcome_name=model.outcome,
    )


def true_value(model: StructuralModel, truth: Union[float, str] = "exact", treated: float = 1.0,
               draws: int = 10 * config.MC_CHUNK, seed: int = config.DEFAULT_SEED) -> float:
    """Numeric truth, exact enumeration (discrete models) or a Monte Carlo run."""
    if isinstance(truth, (int, float)):
        return float(truth)
    if truth == "exact":
        return interventional_mean_exact(model, treated)
    if truth == "mc":
        return interventional_mean_mc(model, treated, draws, seed)[0]
    raise ConfigError(f"truth must be a number, 'exact' or 'mc', got {truth!r}")


# ---------- Scenarios ----------
@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int
    specs: NuisanceSpecs
    estimators: Tuple[str, ...] = DEFAULT_ESTIMATORS
    sample_sizes: Tuple[int, ...] = (100, 250, 500)
    replications: int = 1000
    base_seed: int = config.DEFAULT_SEED
    label: str = ""

    def __post_init__(self):
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"scenario {self.scenario_id}: unknown estimators {unknown}")
        if self.replications < 1:
            raise ConfigError(f"scenario {self.scenario_id}: replications must be at least 1")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ConfigError(f"scenario {self.scenario_id}: sample sizes must be positive")


# Working-model overrides on top of the pairwise specs, per builtin mechanism. Wherever the
# mediator model is wrong, A | M, L drops L1 too, so both W1 representations are misspecified.
SCENARIO_FAMILIES: Dict[str, Dict[int, Dict[str, str]]] = {
    "rare_outcome": {
        1: {"mediator": "A + L1 + L2 + L1:L2"},
        2: {"mediator": "A + L1 + L2", "exposure": "L1 + L1^2", "exposure_mediator": "M + L2"},
        3: {"mediator": "A + L2", "exposure_mediator": "M + L2", "projection": "L2"},
        4: {"outcome": "M + L1 + L2", "projection": "L2:(1-L1)", "outcome_full": "A + M + L1 + L2"},
    },
    "binary": {
        1: {},
        2: {"mediator": "A + L2", "exposure": "L2", "exposure_mediator": "M + L2"},
        3: {"mediator": "A + L2", "exposure_mediator": "M + L2", "projection": "L2"},
        4: {"outcome": "M + L1 + L2", "projection": "L2:(1-L1)", "outcome_full": "A + M + L1 + L2"},
    },
}

SPEC_FIELDS = ("outcome", "exposure", "exposure_mediator", "mediator", "projection", "outcome_full")


def apply_overrides(base: NuisanceSpecs, overrides: Mapping[str, str]) -> NuisanceSpecs:
    unknown = set(overrides) - set(SPEC_FIELDS)
    if unknown:
        raise ConfigError(f"unknown nuisance models {sorted(unknown)}; expected {SPEC_FIELDS}")
    if not overrides:
        return base
    parsed = NuisanceSpecs.from_formulas(**{**base.to_dict(), **overrides})
    return replace(base, **{k: getattr(parsed, k) for k in overrides})


def scenario_specs(model: StructuralModel, scenario_id: int, family: Optional[str] = None,
                   weight_form: str = WeightForm.DENSITY.value) -> NuisanceSpecs:
    """Working models for one scenario; scenario 1 is the pairwise set, 2-4 misspecify parts of it."""
    if scenario_id not in SCENARIO_IDS:
        raise ConfigError(f"scenario id must be one of {SCENARIO_IDS}, got {scenario_id}")
    family = family or model.name
    base = pairwise_specs(model.covariates, weight_form)
    if family not in SCENARIO_FAMILIES:
        if scenario_id != 1:
            raise ConfigError(f"model '{model.name}' has no scenario family; only scenario 1 is defined")
        return base
    specs = apply_overrides(base, SCENARIO_FAMILIES[family][1])
    return apply_overrides(specs, SCENARIO_FAMILIES[family][scenario_id]) if scenario_id != 1 else specs


# ---------- Metrics ----------
@dataclass
class MetricsRow:
    estimator: str
    n: int
    scenario: int
    replications: int
    failed: int
    mean_estimate: float
    bias_x100: float
    se_x100: float
    standardized_bias: float
    sd_degenerate: bool
    out_of_bounds: int
    coverage: Optional[float] = None
    model_se_x100: Optional[float] = None  # mean reported (sandwich) SE

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ReplicationRecord:
    scenario: int
    estimator: str
    n: int
    replication: int
    psi_hat: Optional[float] = None
    se: Optional[float] = None
    within_bounds: bool = True
    error: Optional[str] = None
    covered: Optional[bool] = None


def summarize(estimator: str, n: int, scenario: int, records: Sequence[ReplicationRecord],
              truth: float) -> MetricsRow:
    """Moments over successful replications; failures are counted, not averaged."""
    ok = [r for r in records if r.error is None]
    failed = len(records) - len(ok)
    estimates = np.array([r.psi_hat for r in ok], dtype=float)
    if estimates.size == 0:
        return MetricsRow(estimator, n, scenario, len(records), failed, float("nan"), float("nan"),
                          float("nan"), float("nan"), True, 0, None)
    mean = float(np.mean(estimates))
    sd = float(np.std(estimates, ddof=1)) if estimates.size > 1 else 0.0
    degenerate = not sd > 0.0
    standardized = float("nan") if degenerate else 100.0 * (mean - truth) / sd
    covered = [r.covered for r in ok if r.covered is not None]
    model_se = [r.se for r in ok if r.se is not None]
    return MetricsRow(
        estimator=estimator,
        n=n,
        scenario=scenario,
        replications=len(records),
        failed=failed,
        mean_estimate=mean,
        bias_x100=100.0 * (mean - truth),
        se_x100=100.0 * sd,
        standardized_bias=standardized,
        sd_degenerate=degenerate,
        out_of_bounds=sum(not r.within_bounds for r in ok),
        coverage=float(np.mean(covered)) if covered else None,
        model_se_x100=100.0 * float(np.mean(model_se)) if model_se else None,
    )


# ---------- Study runner ----------
def _replicate(model: StructuralModel, scenarios: Sequence[ScenarioSpec], n: int, rep: int,
               truth: float, treated: float) -> List[ReplicationRecord]:
    datasets: Dict[int, Dataset] = {}
    records: List[ReplicationRecord] = []
    for scenario in scenarios:
        if n not in scenario.sample_sizes or rep >= scenario.replications:
            continue
        if scenario.base_seed not in datasets:
            datasets[scenario.base_seed] = generate(model, n, utils.rng_stream(scenario.base_seed, n, rep), treated)
        data = datasets[scenario.base_seed]
        for name in scenario.estimators:
            record = ReplicationRecord(scenario.scenario_id, name, n, rep)
            try:
                report = run_estimator(name, data, scenario.specs)
                record.psi_hat = report.psi_hat
                record.se = report.se
                record.within_bounds = report.within_bounds
                if report.ci is not None:
                    record.covered = bool(report.ci[0] <= truth <= report.ci[1])
            except FrontdoorError as e:
                logger.error(f"Replication {rep} (n={n}, scenario {scenario.scenario_id}, {name}) failed: {e}")
                record.error = type(e).__name__
            records.append(record)
    logger.debug(f"Finished replication {rep} at n={n}")
    return records


def run_study(model: StructuralModel, scenarios: Sequence[ScenarioSpec], truth: float,
              workers: int = config.DEFAULT_WORKERS, treated: float = 1.0) -> List[MetricsRow]:
    """Metrics per (estimator, n, scenario); identical output for every worker count."""
    sizes = sorted({n for s in scenarios for n in s.sample_sizes})
    max_reps = max(s.replications for s in scenarios)
    tasks = [(n, rep) for n in sizes for rep in range(max_reps)]
    logger.info(f"Study on '{model.name}': {len(scenarios)} scenarios, {len(tasks)} datasets, {workers} workers")
    batches = Parallel(n_jobs=workers)(
        delayed(_replicate)(model, scenarios, n, rep, truth, treated) for n, rep in tasks
    )
    grouped: Dict[Tuple[str, int, int], List[ReplicationRecord]] = {}
    for batch in batches:
        for record in batch:
            grouped.setdefault((record.estimator, record.n, record.scenario), []).append(record)
    rows = []
    for scenario in scenarios:
        for n in scenario.sample_sizes:
            for name in scenario.estimators:
                records = grouped.get((name, n, scenario.scenario_id), [])
                rows.append(summarize(name, n, scenario.scenario_id, records, truth))
    failed = sum(r.failed for r in rows)
    if failed:
        logger.warning(f"{failed} estimator runs failed and were excluded from the moments")
    return rows


# ---------- Study files ----------
class ScenarioOverride(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    label: str = ""
    base: int = 1
    specs: Dict[str, str] = Field(default_factory=dict)


class StudyFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str
    family: Optional[str] = None
    truth: Union[float, str] = "exact"
    mc_draws: int = 10 * config.MC_CHUNK
    treated: float = 1.0
    sample_sizes: List[int] = Field(default_factory=lambda: [100, 250, 500])
    replications: int = 1000
    seed: int = config.DEFAULT_SEED
    estimators: List[str] = Field(default_factory=lambda: list(DEFAULT_ESTIMATORS))
    scenarios: List[Union[int, ScenarioOverride]] = Field(default_factory=lambda: list(SCENARIO_IDS))
    weight_form: str = WeightForm.DENSITY.value
    workers: int = config.DEFAULT_WORKERS

    @field_validator("weight_form")
    @classmethod
    def _known_form(cls, v: str) -> str:
        return WeightForm(v).value


@dataclass
class Study:
    model: StructuralModel
    scenarios: List[ScenarioSpec]
    truth: float
    workers: int
    treated: float
    settings: Dict[str, Any] = field(default_factory=dict)


def build_study(payload: Mapping[str, Any], replications: Optional[int] = None,
                sample_sizes: Optional[Sequence[int]] = None, workers: Optional[int] = None,
                seed: Optional[int] = None) -> Study:
    """Validate a study definition; keyword arguments override the file."""
    try:
        parsed = StudyFile.model_validate(dict(payload))
    except ValidationError as e:
        raise ConfigError(f"invalid study definition: {e}") from e
    if replications is not None:
        parsed.replications = replications
    if sample_sizes is not None:
        parsed.sample_sizes = list(sample_sizes)
    if workers is not None:
        parsed.workers = workers
    if seed is not None:
        parsed.seed = seed
    model = resolve_model(parsed.model)
    scenarios = []
    for entry in parsed.scenarios:
        if isinstance(entry, int):
            scenario_id, label, specs = entry, "", scenario_specs(model, entry, parsed.family, parsed.weight_form)
        else:
            base = scenario_specs(model, entry.base, parsed.family, parsed.weight_form)
            scenario_id, label, specs = entry.id, entry.label, apply_overrides(base, entry.specs)
        scenarios.append(ScenarioSpec(scenario_id, specs, tuple(parsed.estimators), tuple(parsed.sample_sizes),
                                      parsed.replications, parsed.seed, label))
    truth = true_value(model, parsed.truth, parsed.treated, parsed.mc_draws, parsed.seed)
    settings = parsed.model_dump()
    settings["resolved_truth"] = truth
    return Study(model, scenarios, truth, parsed.workers, parsed.treated, settings)


# ---------- Output ----------
def metrics_frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in rows])


def write_metrics(rows: Sequence[MetricsRow], out_dir: str, settings: Mapping[str, Any],
                  stem: str = "metrics") -> Tuple[str, str]:
    """Write ``<stem>.csv`` and ``<stem>.json`` (rows plus config echo and provenance)."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    metrics_frame(rows).to_csv(csv_path, index=False, na_rep="NA", float_format="%.10g")
    utils.write_json(
        {"provenance": utils.provenance(dict(settings)), "config": dict(settings),
         "rows": [r.to_dict() for r in rows]},
        json_path,
    )
    logger.info(f"Wrote {len(rows)} metric rows to {csv_path}")
    return csv_path, json_path

