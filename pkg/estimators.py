"""Estimators of the intervening-variable mean E(Y^{a_M = a_t}).

Every estimator follows the same decomposition

    psi = P(A=a_t) E(Y | A=a_t) + sum_c P(A=c) psi3_c

and differs in how psi3_c = E{h_t(L) | A=c} is estimated:

* ``wice``: weighted regressions Q(M,L) (weights W1) then R(L) (weights W2)
* ``ice``: the same regressions unweighted
* ``tmle``: unweighted fits plus intercept fluctuations with W1 and W2
* ``itmle``: iterated fluctuations of Q and of f(M|a_t,L), binary mediators
* ``aipw``: plug-in plus the influence-function correction
* ``ipw``: inverse weighting by f(a_t|L) with a full outcome model
* ``wice-nocov`` and ``wice-multilevel``: the covariate-free and k-level variants

Outcomes are mapped to [0, 1] by (Y - min)/(max - min) and fitted on the logit
scale, which keeps the regression-based estimators inside [min Y, max Y].
"""

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit
from typing_extensions import Protocol, runtime_checkable

import config
import glm
import utils
from data_model import EXPOSURE_ALIAS, MEDIATOR_ALIAS, Dataset, Factor, ModelSpec, Term, build_design
from eif import (
    NuisanceValues,
    WeightForm,
    eif_generalized,
    eif_multilevel,
    eif_nocov,
    variance_from_influence,
    wald_interval,
)
from errors import (
    ArmTooSmall,
    ConfigError,
    FitError,
    FluctuationNonConvergence,
    IterationLimit,
    NuisanceNonConvergence,
    PositivityViolation,
    SingleArm,
    UnsupportedExposure,
    UnsupportedMediator,
)

# ---------- Logging ----------
logger = utils.get_logger(__name__)

BOUNDS_TOL = 1e-12


# ---------- Specifications ----------
@dataclass(frozen=True)
class NuisanceSpecs:
    """Working models for every nuisance regression.

    exposure            P(A | L)
    exposure_mediator   P(A | M, L)
    mediator            f(M | A, L)
    outcome             b0 = E(Y | M, L, A=a_c), fitted as Q(M, L)
    projection          h_t = E(b0 | A=a_t, L), fitted as R(L)
    outcome_full        E(Y | A, M, L) for IPW; derived from ``outcome`` when absent
    """

    outcome: ModelSpec
    exposure: Optional[ModelSpec] = None
    exposure_mediator: Optional[ModelSpec] = None
    mediator: Optional[ModelSpec] = None
    projection: Optional[ModelSpec] = None
    outcome_full: Optional[ModelSpec] = None
    weight_form: WeightForm = WeightForm.PROPENSITY

    def __post_init__(self):
        object.__setattr__(self, "weight_form", WeightForm(self.weight_form))
        if self.weight_form is WeightForm.PROPENSITY and self.exposure_mediator is None:
            raise ConfigError("propensity-ratio weights need an exposure_mediator (A | M, L) model")
        if self.weight_form is WeightForm.DENSITY and self.mediator is None:
            raise ConfigError("density-ratio weights need a mediator (M | A, L) model")

    @classmethod
    def from_formulas(cls, outcome: str, exposure: Optional[str] = None,
                      exposure_mediator: Optional[str] = None, mediator: Optional[str] = None,
                      projection: Optional[str] = None, outcome_full: Optional[str] = None,
                      weight_form: str = WeightForm.PROPENSITY.value) -> "NuisanceSpecs":
        def parse(formula: Optional[str], role: str) -> Optional[ModelSpec]:
            return None if formula is None else ModelSpec.parse(formula, "binomial-logit", role)

        return cls(
            outcome=parse(outcome, "outcome"),
            exposure=parse(exposure, "exposure"),
            exposure_mediator=parse(exposure_mediator, "exposure"),
            mediator=parse(mediator, "mediator"),
            projection=parse(projection, "pseudo-outcome"),
            outcome_full=parse(outcome_full, "outcome"),
            weight_form=WeightForm(weight_form),
        )

    def require(self, name: str, estimator_id: str) -> ModelSpec:
        spec = getattr(self, name)
        if spec is None:
            raise ConfigError(f"estimator '{estimator_id}' needs a '{name}' model")
        return spec

    def full_outcome(self) -> ModelSpec:
        """E(Y | A, M, L): the given model, or the b0 terms plus A and A times each b0 term."""
        if self.outcome_full is not None:
            return self.outcome_full
        exposure = Term.of([Factor(EXPOSURE_ALIAS)])
        interactions = [Term.of(t.factors + (Factor(EXPOSURE_ALIAS),)) for t in self.outcome.terms
                        if EXPOSURE_ALIAS not in t.variables]
        terms = [t for t in self.outcome.terms]
        for term in [exposure] + interactions:
            if term.label not in {t.label for t in terms}:
                terms.append(term)
        return replace(self.outcome, terms=tuple(terms))

    def to_dict(self) -> Dict[str, Any]:
        out = {name: (getattr(self, name).formula if getattr(self, name) is not None else None)
               for name in ("outcome", "exposure", "exposure_mediator", "mediator", "projection", "outcome_full")}
        out["weight_form"] = self.weight_form.value
        return out


def _pairwise(names: Sequence[str]) -> str:
    # dummies of one categorical column (``col[T.x]``) are never crossed with each other
    source = [name.split("[", 1)[0] for name in names]
    terms = list(names) + [f"{a}:{b}" for i, a in enumerate(names) for j, b in enumerate(names)
                           if j > i and source[i] != source[j]]
    return " + ".join(terms) if terms else "1"


def pairwise_specs(covariates: Sequence[str], weight_form: str = WeightForm.DENSITY.value) -> NuisanceSpecs:
    """Main effects plus every pairwise interaction of the variables each model conditions on."""
    cov = list(covariates)
    return NuisanceSpecs.from_formulas(
        outcome=_pairwise([MEDIATOR_ALIAS] + cov),
        exposure=_pairwise(cov),
        exposure_mediator=_pairwise([MEDIATOR_ALIAS] + cov),
        mediator=_pairwise([EXPOSURE_ALIAS] + cov),
        projection=_pairwise(cov),
        outcome_full=_pairwise([EXPOSURE_ALIAS, MEDIATOR_ALIAS] + cov),
        weight_form=weight_form,
    )


# ---------- Reports ----------
@dataclass
class EstimateReport:
    estimator_id: str
    psi_hat: float
    psi3_hat: float
    p_treated: float
    treated_mean: float
    variance: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    within_bounds: bool = True
    nuisance_fits: Dict[str, Any] = field(default_factory=dict)
    components: Dict[float, float] = field(default_factory=dict)
    n: int = 0
    arms: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None

    @property
    def se(self) -> Optional[float]:
        return None if self.variance is None else float(np.sqrt(max(self.variance, 0.0)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimator": self.estimator_id,
            "psi_hat": self.psi_hat,
            "psi3_hat": self.psi3_hat,
            "p_treated": self.p_treated,
            "treated_mean": self.treated_mean,
            "variance": self.variance,
            "se": self.se,
            "ci": list(self.ci) if self.ci is not None else None,
            "within_bounds": self.within_bounds,
            "components": {str(k): v for k, v in self.components.items()},
            "n": self.n,
            "arms": self.arms,
            "seed": self.seed,
            "nuisance_fits": self.nuisance_fits,
        }


# ---------- Pluggable nuisance fitting ----------
@runtime_checkable
class Predictor(Protocol):
    def predict(self, data: Dataset, overrides: Optional[Mapping[str, Any]] = None) -> np.ndarray:
        ...

    def summary(self) -> Dict[str, Any]:
        ...


@runtime_checkable
class NuisanceFitter(Protocol):
    def fit(self, spec: ModelSpec, data: Dataset, response: np.ndarray, rows: np.ndarray,
            weights: Optional[np.ndarray] = None, family_link: str = glm.BINOMIAL) -> Predictor:
        ...


@dataclass
class GLMPredictor:
    spec: ModelSpec
    result: glm.FitResult

    def predict(self, data: Dataset, overrides: Optional[Mapping[str, Any]] = None) -> np.ndarray:
        return self.result.predict(build_design(self.spec, data, overrides))

    def summary(self) -> Dict[str, Any]:
        out = self.result.summary()
        out["formula"] = self.spec.formula
        return out


class GLMFitter:
    """Parametric working models solved by the weighted GLM engine."""

    def fit(self, spec: ModelSpec, data: Dataset, response: np.ndarray, rows: np.ndarray,
            weights: Optional[np.ndarray] = None, family_link: str = glm.BINOMIAL) -> GLMPredictor:
        design = build_design(spec, data).take(rows)
        y = np.asarray(response, dtype=float)[rows]
        w = None if weights is None else np.asarray(weights, dtype=float)[rows]
        return GLMPredictor(spec, glm.fit_weighted(design, y, w, family_link))


DEFAULT_FITTER = GLMFitter()


@contextmanager
def fitting_step(step: str) -> Iterator[None]:
    """Turn model-fitting failures inside ``step`` into NuisanceNonConvergence."""
    try:
        yield
    except FitError as e:
        logger.error(f"Nuisance fit failed at {step}: {e}")
        raise NuisanceNonConvergence(step, e) from e


def _check_arm(spec: ModelSpec, data: Dataset, rows: np.ndarray, level: float) -> None:
    needed = build_design(spec, data).cols + 1
    count = int(np.count_nonzero(rows))
    if count < needed:
        raise ArmTooSmall(level, count, needed)


def _family(spec: ModelSpec) -> str:
    return glm.GAUSSIAN if spec.family_link == glm.GAUSSIAN else glm.BINOMIAL


# ---------- Probability models ----------
class ExposureModel:
    """P(A = a | conditioning set): binomial for two levels, multinomial beyond."""

    def __init__(self, spec: ModelSpec, data: Dataset, fitter: NuisanceFitter, step: str):
        self.spec = spec
        self.levels = data.exposure_levels
        self.step = step
        all_rows = np.ones(data.n, dtype=bool)
        with fitting_step(step):
            if len(self.levels) == 2:
                response = (data.exposure == self.levels[1]).astype(float)
                self.binary: Optional[Predictor] = fitter.fit(spec, data, response, all_rows)
                self.multi: Optional[glm.MultinomialFit] = None
            else:
                self.binary = None
                self.multi = glm.fit_multinomial(build_design(spec, data), data.exposure, levels=self.levels)

    def prob(self, data: Dataset, level: float, overrides: Optional[Mapping[str, Any]] = None) -> np.ndarray:
        level = float(level)
        if self.binary is not None:
            p = self.binary.predict(data, overrides)
            return p if level == self.levels[1] else 1.0 - p
        probs = self.multi.predict_proba(build_design(self.spec, data, overrides))
        return probs[:, self.levels.index(level)]

    def summary(self) -> Dict[str, Any]:
        return self.binary.summary() if self.binary is not None else self.multi.summary()


class MediatorModel:
    """f(M = m | A = a, L) for a discrete mediator."""

    def __init__(self, spec: ModelSpec, data: Dataset, fitter: NuisanceFitter, step: str):
        levels = data.mediator_levels
        if levels is None:
            raise UnsupportedMediator("mediator density models need a discrete mediator; "
                                      "use propensity-ratio weights for a continuous M")
        self.spec = spec
        self.levels = levels
        self.binary: Optional[Predictor] = None
        self.multi: Optional[glm.MultinomialFit] = None
        all_rows = np.ones(data.n, dtype=bool)
        with fitting_step(step):
            if len(levels) == 2:
                response = (data.mediator == levels[1]).astype(float)
                self.binary = fitter.fit(spec, data, response, all_rows)
            elif len(levels) > 2:
                self.multi = glm.fit_multinomial(build_design(spec, data), data.mediator, levels=levels)

    def prob(self, data: Dataset, arm: float, mediator: Optional[Any] = None) -> np.ndarray:
        m = data.mediator if mediator is None else np.broadcast_to(np.asarray(mediator, dtype=float), (data.n,))
        overrides = {EXPOSURE_ALIAS: float(arm)}
        if self.binary is not None:
            p = self.binary.predict(data, overrides)
            return np.where(m == self.levels[1], p, 1.0 - p)
        if self.multi is not None:
            probs = self.multi.predict_proba(build_design(self.spec, data, overrides))
            index = np.searchsorted(np.array(self.levels), m)
            return probs[np.arange(data.n), index]
        return np.ones(data.n)

    def summary(self) -> Dict[str, Any]:
        if self.binary is not None:
            return self.binary.summary()
        return self.multi.summary() if self.multi is not None else {"constant": self.levels}


def _require_positive(values: np.ndarray, rows: np.ndarray, quantity: str) -> None:
    if not np.any(rows):
        return
    low = float(np.min(values[rows]))
    if low < config.POSITIVITY_THRESHOLD:
        raise PositivityViolation(quantity, low, config.POSITIVITY_THRESHOLD)


# ---------- Shared preparation ----------
@dataclass
class _Outcome:
    lo: float
    hi: float

    def to_unit(self, y: np.ndarray) -> np.ndarray:
        return (y - self.lo) / (self.hi - self.lo)

    def from_unit(self, u):
        return self.lo + (self.hi - self.lo) * u


def _offset(values: np.ndarray, family_link: str) -> np.ndarray:
    if family_link == glm.GAUSSIAN:
        return values
    return logit(np.clip(values, config.GLM_PROB_CLIP, 1.0 - config.GLM_PROB_CLIP))


def _within_bounds(psi: float, data: Dataset) -> bool:
    lo, hi = data.outcome_range
    tol = BOUNDS_TOL * max(1.0, hi - lo)
    return bool(lo - tol <= psi <= hi + tol)


def _report(estimator_id: str, data: Dataset, psi: float, psi3: Dict[float, float],
            variance: Optional[float], fits: Dict[str, Any]) -> EstimateReport:
    treated = data.treated_mask
    p_treated = float(np.mean(treated))
    ci = wald_interval(psi, variance) if variance is not None else None
    components = {float(k): float(v) for k, v in psi3.items()}
    psi3_hat = components[data.arm_control[0]] if len(components) == 1 else float("nan")
    report = EstimateReport(
        estimator_id=estimator_id,
        psi_hat=float(psi),
        psi3_hat=float(psi3_hat),
        p_treated=p_treated,
        treated_mean=float(np.mean(data.outcome[treated])),
        variance=variance,
        ci=ci,
        within_bounds=_within_bounds(psi, data),
        nuisance_fits=fits,
        components=components,
        n=data.n,
        arms={"treated": data.arm_treated, "control": list(data.arm_control)},
    )
    logger.info(f"{estimator_id}: psi={report.psi_hat:.6f} se={report.se} n={data.n} in_bounds={report.within_bounds}")
    return report


def _degenerate(estimator_id: str, data: Dataset) -> Optional[EstimateReport]:
    """Reports for samples that need no nuisance fitting, None otherwise."""
    treated = data.treated_mask
    if not np.any(treated):
        raise SingleArm(f"no rows with the treated level {data.arm_treated!r}")
    lo, hi = data.outcome_range
    if lo == hi:
        return _report(estimator_id, data, lo, {c: lo for c in data.arm_control}, 0.0, {"constant_outcome": lo})
    if not np.any(np.isin(data.exposure, data.arm_control)):
        return _report(estimator_id, data, float(np.mean(data.outcome)),
                       {c: float("nan") for c in data.arm_control}, None, {"control_rows": 0})
    return None


def _two_levels(estimator_id: str, data: Dataset) -> float:
    if len(data.exposure_levels) != 2 or len(data.arm_control) != 1:
        raise UnsupportedExposure(
            f"'{estimator_id}' needs a two-level exposure, got levels {list(data.exposure_levels)}; "
            "use wice-multilevel"
        )
    return data.arm_control[0]


def _psi_from_components(data: Dataset, psi3: Mapping[float, float]) -> float:
    """Pn{I(a_t)Y + sum_c I(A=c) psi3_c}."""
    pseudo = np.where(data.treated_mask, data.outcome, 0.0)
    for level, value in psi3.items():
        pseudo = np.where(data.arm_mask(level), value, pseudo)
    return float(np.mean(pseudo))


def _intercept_only(values: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Intercept-only regression on the pseudo-outcome; its fitted value is the (weighted) mean."""
    return float(np.average(values, weights=weights))


@dataclass
class _Weights:
    """Exposure and mediator nuisance evaluations for one control level."""

    p_treated_l: np.ndarray
    p_control_l: np.ndarray
    p_treated_ml: Optional[np.ndarray] = None
    p_control_ml: Optional[np.ndarray] = None
    f_treated: Optional[np.ndarray] = None
    f_control: Optional[np.ndarray] = None

    def w1(self, form: WeightForm) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            if form is WeightForm.DENSITY:
                return self.f_treated / self.f_control
            return (self.p_control_l * self.p_treated_ml) / (self.p_treated_l * self.p_control_ml)

    def w2(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.p_control_l / self.p_treated_l

    def check(self, treated: np.ndarray, control: np.ndarray, form: WeightForm) -> None:
        _require_positive(self.p_treated_l, treated | control, "P(A=a_t|L)")
        if form is WeightForm.DENSITY:
            _require_positive(self.f_control, control, "f(M|a_c,L)")
        else:
            _require_positive(self.p_control_ml, control, "P(A=a_c|M,L)")

    def nuisance(self, b0, h, psi3, psi, p_treated, form: WeightForm) -> NuisanceValues:
        ratio = None
        if self.f_treated is not None:
            ratio = np.where(self.f_control > 0, self.f_treated / np.where(self.f_control > 0, self.f_control, 1.0), 0.0)
        return NuisanceValues(
            b0=b0, h=h, psi3=psi3, psi=psi, p_treated=p_treated,
            p_treated_l=self.p_treated_l, p_control_l=self.p_control_l,
            p_treated_ml=self.p_treated_ml, p_control_ml=self.p_control_ml,
            density_ratio=ratio if form is WeightForm.DENSITY else None,
        )


def _fit_weights(data: Dataset, specs: NuisanceSpecs, fitter: NuisanceFitter, estimator_id: str,
                 form: WeightForm, controls: Sequence[float]) -> Tuple[Dict[float, _Weights], Dict[str, Any]]:
    kappa = ExposureModel(specs.require("exposure", estimator_id), data, fitter, "exposure model P(A|L)")
    fits: Dict[str, Any] = {"exposure": kappa.summary()}
    p_t = kappa.prob(data, data.arm_treated)
    out: Dict[float, _Weights] = {c: _Weights(p_t, kappa.prob(data, c)) for c in controls}
    if form is WeightForm.DENSITY:
        gamma = MediatorModel(specs.require("mediator", estimator_id), data, fitter, "mediator model f(M|A,L)")
        fits["mediator"] = gamma.summary()
        f_t = gamma.prob(data, data.arm_treated)
        for c, w in out.items():
            w.f_treated, w.f_control = f_t, gamma.prob(data, c)
    else:
        alpha = ExposureModel(specs.require("exposure_mediator", estimator_id), data, fitter,
                              "exposure-mediator model P(A|M,L)")
        fits["exposure_mediator"] = alpha.summary()
        pm_t = alpha.prob(data, data.arm_treated)
        for c, w in out.items():
            w.p_treated_ml, w.p_control_ml = pm_t, alpha.prob(data, c)
    return out, fits


# ---------- Weighted ICE family ----------
def _weighted_ice(estimator_id: str, data: Dataset, specs: NuisanceSpecs, fitter: NuisanceFitter,
                  weighted: bool, multilevel: bool) -> EstimateReport:
    if multilevel:
        if len(data.exposure_levels) < 2:
            raise UnsupportedExposure("exposure needs at least two levels")
    else:
        _two_levels(estimator_id, data)
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    form = specs.weight_form
    scale = _Outcome(*data.outcome_range)
    y_unit = scale.to_unit(data.outcome)
    treated = data.treated_mask
    outcome_spec = specs.outcome
    projection_spec = specs.require("projection", estimator_id) if data.has_covariates else None
    for level in data.arm_control:
        _check_arm(outcome_spec, data, data.arm_mask(level), level)
    if projection_spec is not None:
        _check_arm(projection_spec, data, treated, data.arm_treated)

    fits: Dict[str, Any] = {}
    weights: Dict[float, _Weights] = {}
    if weighted:
        weights, fits = _fit_weights(data, specs, fitter, estimator_id, form, data.arm_control)

    psi3: Dict[float, float] = {}
    blocks: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}
    for level in data.arm_control:
        control = data.arm_mask(level)
        w1 = w2 = None
        if weighted:
            weights[level].check(treated, control, form)
            w1 = np.where(control, weights[level].w1(form), 0.0)
            w2 = np.where(treated, weights[level].w2(), 0.0)
        with fitting_step(f"outcome regression Q(M,L) among A={level:g}"):
            q_model = fitter.fit(outcome_spec, data, y_unit, control, w1, _family(outcome_spec))
        q_hat = q_model.predict(data)
        if projection_spec is not None:
            with fitting_step(f"projection R(L) among A={data.arm_treated:g}"):
                r_model = fitter.fit(projection_spec, data, q_hat, treated, w2, _family(projection_spec))
            r_hat = r_model.predict(data)
            fits[f"projection[{level:g}]"] = r_model.summary()
        else:
            r_hat = np.full(data.n, _intercept_only(q_hat[treated], None if w2 is None else w2[treated]))
        fits[f"outcome[{level:g}]"] = q_model.summary()
        psi3_unit = float(np.clip(_intercept_only(r_hat[control]), 0.0, 1.0)) \
            if _family(outcome_spec) == glm.BINOMIAL else _intercept_only(r_hat[control])
        psi3[level] = float(scale.from_unit(psi3_unit))
        blocks[level] = (scale.from_unit(q_hat), scale.from_unit(r_hat))

    psi = _psi_from_components(data, psi3)
    variance = None
    if weighted:
        nuisances = {
            level: weights[level].nuisance(blocks[level][0], blocks[level][1], psi3[level], psi,
                                           float(np.mean(treated)), form)
            for level in data.arm_control
        }
        phi = eif_multilevel(data.exposure, data.arm_treated, data.outcome, nuisances, psi, form)
        variance = variance_from_influence(phi)
    return _report(estimator_id, data, psi, psi3, variance, fits)


def estimate_wice(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Weighted iterated conditional expectation estimator (two-level exposure)."""
    return _weighted_ice("wice", data, specs, fitter or DEFAULT_FITTER, weighted=True, multilevel=False)


def estimate_ice(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Plug-in iterated conditional expectation: every regression weight is 1."""
    return _weighted_ice("ice", data, specs, fitter or DEFAULT_FITTER, weighted=False, multilevel=False)


def estimate_wice_multilevel(data: Dataset, specs: NuisanceSpecs,
                             fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Weighted ICE for an exposure with k >= 2 levels; one block per control level."""
    return _weighted_ice("wice-multilevel", data, specs, fitter or DEFAULT_FITTER, weighted=True, multilevel=True)


def estimate_wice_nocov(data: Dataset, specs: NuisanceSpecs,
                        fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Weighted ICE without baseline covariates.

    Q(M) is fitted among controls with W1; psi3 is the W2-weighted intercept
    among treated rows, and W2 = P(a_c)/P(a_t) is constant.
    """
    estimator_id = "wice-nocov"
    fitter = fitter or DEFAULT_FITTER
    if data.has_covariates:
        raise ConfigError(f"'{estimator_id}' takes a dataset without covariates, got {list(data.covariate_names)}")
    control_level = _two_levels(estimator_id, data)
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    form = specs.weight_form
    treated = data.treated_mask
    control = data.arm_mask(control_level)
    p_t, p_c = float(np.mean(treated)), float(np.mean(control))
    scale = _Outcome(*data.outcome_range)
    _check_arm(specs.outcome, data, control, control_level)

    fits: Dict[str, Any] = {}
    if form is WeightForm.DENSITY:
        gamma = MediatorModel(specs.require("mediator", estimator_id), data, fitter, "mediator model f(M|A)")
        fits["mediator"] = gamma.summary()
        f_t, f_c = gamma.prob(data, data.arm_treated), gamma.prob(data, control_level)
        _require_positive(f_c, control, "f(M|a_c)")
        w1 = f_t / np.where(f_c > 0, f_c, 1.0)
        ratio = w1
        p_t_m = p_c_m = None
    else:
        alpha = ExposureModel(specs.require("exposure_mediator", estimator_id), data, fitter,
                              "exposure-mediator model P(A|M)")
        fits["exposure_mediator"] = alpha.summary()
        p_t_m, p_c_m = alpha.prob(data, data.arm_treated), alpha.prob(data, control_level)
        _require_positive(p_c_m, control, "P(A=a_c|M)")
        w1 = (p_c / p_t) * p_t_m / np.where(p_c_m > 0, p_c_m, 1.0)
        ratio = None

    with fitting_step(f"outcome regression Q(M) among A={control_level:g}"):
        q_model = fitter.fit(specs.outcome, data, scale.to_unit(data.outcome), control,
                             np.where(control, w1, 0.0), _family(specs.outcome))
    fits[f"outcome[{control_level:g}]"] = q_model.summary()
    q_hat = q_model.predict(data)
    w2 = np.full(int(np.count_nonzero(treated)), p_c / p_t)
    psi3_unit = _intercept_only(q_hat[treated], w2)
    if _family(specs.outcome) == glm.BINOMIAL:
        psi3_unit = float(np.clip(psi3_unit, 0.0, 1.0))
    psi3 = float(scale.from_unit(psi3_unit))
    psi = _psi_from_components(data, {control_level: psi3})

    nuisance = NuisanceValues(
        b0=scale.from_unit(q_hat), h=np.full(data.n, psi3), psi3=psi3, psi=psi, p_treated=p_t,
        p_control_l=np.full(data.n, p_c),
        p_treated_ml=p_t_m, p_control_ml=p_c_m,
        density_ratio=np.where(control, ratio, 0.0) if ratio is not None else None,
    )
    phi = eif_nocov(treated, control, data.outcome, nuisance, form)
    return _report(estimator_id, data, psi, {control_level: psi3}, variance_from_influence(phi), fits)


# ---------- Targeted estimators ----------
def estimate_tmle(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None,
                  weighted_initial: bool = False) -> EstimateReport:
    """Targeted maximum likelihood.

    Initial Q and R are fitted without weights (through ``fitter``), then each
    is updated by an intercept fluctuation on the logit scale: delta solves the
    W1-weighted score among controls, nu the W2-weighted score among treated
    rows. ``weighted_initial`` starts from the weighted ICE fits, which leaves
    both fluctuations at zero.
    """
    estimator_id = "tmle"
    fitter = fitter or DEFAULT_FITTER
    control_level = _two_levels(estimator_id, data)
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    form = specs.weight_form
    scale = _Outcome(*data.outcome_range)
    y_unit = scale.to_unit(data.outcome)
    treated, control = data.treated_mask, data.arm_mask(control_level)
    projection_spec = specs.require("projection", estimator_id)
    _check_arm(specs.outcome, data, control, control_level)
    _check_arm(projection_spec, data, treated, data.arm_treated)

    weights, fits = _fit_weights(data, specs, fitter, estimator_id, form, [control_level])
    wts = weights[control_level]
    wts.check(treated, control, form)
    w1 = np.where(control, wts.w1(form), 0.0)
    w2 = np.where(treated, wts.w2(), 0.0)
    family_q, family_r = _family(specs.outcome), _family(projection_spec)

    with fitting_step(f"initial outcome regression Q(M,L) among A={control_level:g}"):
        q_model = fitter.fit(specs.outcome, data, y_unit, control, w1 if weighted_initial else None, family_q)
    fits["outcome"] = q_model.summary()
    q_offset = _offset(q_model.predict(data), family_q)
    try:
        delta = glm.fit_offset(q_offset[control], y_unit[control], w1[control], family_q)
    except FitError as e:
        raise FluctuationNonConvergence(f"outcome fluctuation: {e}") from e
    q_star = glm.inverse_link(family_q, q_offset + delta)

    with fitting_step(f"initial projection R(L) among A={data.arm_treated:g}"):
        r_model = fitter.fit(projection_spec, data, q_star, treated, w2 if weighted_initial else None, family_r)
    fits["projection"] = r_model.summary()
    r_offset = _offset(r_model.predict(data), family_r)
    try:
        nu = glm.fit_offset(r_offset[treated], q_star[treated], w2[treated], family_r)
    except FitError as e:
        raise FluctuationNonConvergence(f"projection fluctuation: {e}") from e
    r_star = glm.inverse_link(family_r, r_offset + nu)
    fits["fluctuation"] = {"delta": delta, "nu": nu}

    psi3_unit = _intercept_only(r_star[control])
    if family_q == glm.BINOMIAL and family_r == glm.BINOMIAL:
        psi3_unit = float(np.clip(psi3_unit, 0.0, 1.0))
    psi3 = float(scale.from_unit(psi3_unit))
    psi = _psi_from_components(data, {control_level: psi3})
    nuisance = wts.nuisance(scale.from_unit(q_star), scale.from_unit(r_star), psi3, psi, float(np.mean(treated)), form)
    phi = eif_generalized(treated, control, data.outcome, nuisance, form)
    return _report(estimator_id, data, psi, {control_level: psi3}, variance_from_influence(phi), fits)


def estimate_itmle(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Iterative TMLE for a binary mediator.

    Alternates a W1-weighted intercept fluctuation of Q(M,L) (with W1 rebuilt from
    the current f(M|a_t,L)) and a W2-weighted fluctuation of logit P(M=1|a_t,L)
    along Q(1,L) - Q(0,L), until both updates fall below tolerance.
    """
    estimator_id = "itmle"
    fitter = fitter or DEFAULT_FITTER
    control_level = _two_levels(estimator_id, data)
    if data.mediator_levels != (0.0, 1.0):
        raise UnsupportedMediator(f"'{estimator_id}' needs a binary 0/1 mediator")
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    scale = _Outcome(*data.outcome_range)
    y_unit = scale.to_unit(data.outcome)
    treated, control = data.treated_mask, data.arm_mask(control_level)
    m = data.mediator
    _check_arm(specs.outcome, data, control, control_level)

    kappa = ExposureModel(specs.require("exposure", estimator_id), data, fitter, "exposure model P(A|L)")
    gamma = MediatorModel(specs.require("mediator", estimator_id), data, fitter, "mediator model f(M|A,L)")
    fits: Dict[str, Any] = {"exposure": kappa.summary(), "mediator": gamma.summary()}
    p_t_l, p_c_l = kappa.prob(data, data.arm_treated), kappa.prob(data, control_level)
    _require_positive(p_t_l, treated | control, "P(A=a_t|L)")
    w2 = np.where(treated, p_c_l / np.where(p_t_l > 0, p_t_l, 1.0), 0.0)
    p1_control = gamma.prob(data, control_level, 1.0)
    f_control = np.where(m == 1.0, p1_control, 1.0 - p1_control)
    _require_positive(f_control, control, "f(M|a_c,L)")
    p1_treated_logit = _offset(gamma.prob(data, data.arm_treated, 1.0), glm.BINOMIAL)

    with fitting_step(f"initial outcome regression Q(M,L) among A={control_level:g}"):
        q_model = fitter.fit(specs.outcome, data, y_unit, control, None, glm.BINOMIAL)
    fits["outcome"] = q_model.summary()
    q_logit = {
        "obs": _offset(q_model.predict(data), glm.BINOMIAL),
        0.0: _offset(q_model.predict(data, {MEDIATOR_ALIAS: 0.0}), glm.BINOMIAL),
        1.0: _offset(q_model.predict(data, {MEDIATOR_ALIAS: 1.0}), glm.BINOMIAL),
    }

    iterations, delta, nu = 0, np.inf, np.inf
    while True:
        iterations += 1
        p1_t = expit(p1_treated_logit)
        f_treated = np.where(m == 1.0, p1_t, 1.0 - p1_t)
        w1 = np.where(control, f_treated / np.where(f_control > 0, f_control, 1.0), 0.0)
        try:
            delta = glm.fit_offset(q_logit["obs"][control], y_unit[control], w1[control], glm.BINOMIAL)
        except FitError as e:
            raise FluctuationNonConvergence(f"outcome fluctuation at iteration {iterations}: {e}") from e
        for key in q_logit:
            q_logit[key] = q_logit[key] + delta
        q_diff = expit(q_logit[1.0]) - expit(q_logit[0.0])
        try:
            nu = glm.fit_offset(p1_treated_logit[treated], m[treated], w2[treated], glm.BINOMIAL,
                                covariate=q_diff[treated])
        except FitError as e:
            raise FluctuationNonConvergence(f"mediator fluctuation at iteration {iterations}: {e}") from e
        p1_treated_logit = p1_treated_logit + nu * q_diff
        logger.debug(f"itmle iteration {iterations}: delta={delta:.3e} nu={nu:.3e}")
        if abs(delta) < config.ITMLE_TOL and abs(nu) < config.ITMLE_TOL:
            break
        if iterations >= config.ITMLE_MAX_ITER:
            raise IterationLimit(iterations, abs(delta), abs(nu))
    fits["fluctuation"] = {"iterations": iterations, "delta": delta, "nu": nu}

    p1_t = expit(p1_treated_logit)
    q0, q1 = expit(q_logit[0.0]), expit(q_logit[1.0])
    h_unit = q0 * (1.0 - p1_t) + q1 * p1_t
    psi3 = float(scale.from_unit(float(np.clip(_intercept_only(h_unit[control]), 0.0, 1.0))))
    psi = _psi_from_components(data, {control_level: psi3})

    f_treated = np.where(m == 1.0, p1_t, 1.0 - p1_t)
    nuisance = NuisanceValues(
        b0=scale.from_unit(expit(q_logit["obs"])), h=scale.from_unit(h_unit), psi3=psi3, psi=psi,
        p_treated=float(np.mean(treated)), p_treated_l=p_t_l, p_control_l=p_c_l,
        density_ratio=np.where(control, f_treated / np.where(f_control > 0, f_control, 1.0), 0.0),
    )
    phi = eif_generalized(treated, control, data.outcome, nuisance, WeightForm.DENSITY)
    report = _report(estimator_id, data, psi, {control_level: psi3}, variance_from_influence(phi), fits)
    return report


# ---------- Influence-function and weighting estimators ----------
def estimate_aipw(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """One-step estimator: plug-in psi3 from sum_m b0(m,L) f(m|a_t,L) plus the influence-function correction.

    Uses density-ratio weights whatever ``specs.weight_form`` says and never
    clamps the result.
    """
    estimator_id = "aipw"
    fitter = fitter or DEFAULT_FITTER
    control_level = _two_levels(estimator_id, data)
    levels = data.mediator_levels
    if levels is None:
        raise UnsupportedMediator("aipw sums over the mediator support and needs a discrete mediator")
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    scale = _Outcome(*data.outcome_range)
    treated, control = data.treated_mask, data.arm_mask(control_level)
    _check_arm(specs.outcome, data, control, control_level)
    kappa = ExposureModel(specs.require("exposure", estimator_id), data, fitter, "exposure model P(A|L)")
    gamma = MediatorModel(specs.require("mediator", estimator_id), data, fitter, "mediator model f(M|A,L)")
    fits: Dict[str, Any] = {"exposure": kappa.summary(), "mediator": gamma.summary()}
    wts = _Weights(kappa.prob(data, data.arm_treated), kappa.prob(data, control_level),
                   f_treated=gamma.prob(data, data.arm_treated), f_control=gamma.prob(data, control_level))
    wts.check(treated, control, WeightForm.DENSITY)

    with fitting_step(f"outcome regression b0(M,L) among A={control_level:g}"):
        q_model = fitter.fit(specs.outcome, data, scale.to_unit(data.outcome), control, None, _family(specs.outcome))
    fits["outcome"] = q_model.summary()
    b0 = scale.from_unit(q_model.predict(data))
    h = np.zeros(data.n)
    for level in levels:
        h = h + scale.from_unit(q_model.predict(data, {MEDIATOR_ALIAS: level})) * gamma.prob(data, data.arm_treated, level)
    psi3_plugin = float(np.mean(h[control]))

    nuisance = wts.nuisance(b0, h, psi3_plugin, 0.0, float(np.mean(treated)), WeightForm.DENSITY)
    # phi evaluated at psi = 0 is the per-row pseudo-value whose mean is the one-step estimate
    pseudo = eif_generalized(treated, control, data.outcome, nuisance, WeightForm.DENSITY)
    psi = float(np.mean(pseudo))
    phi = pseudo - psi
    p_t, p_c = float(np.mean(treated)), float(np.mean(control))
    psi3 = (psi - p_t * float(np.mean(data.outcome[treated]))) / p_c
    fits["psi3_plugin"] = psi3_plugin
    return _report(estimator_id, data, psi, {control_level: psi3}, variance_from_influence(phi), fits)


def estimate_ipw(data: Dataset, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    """Inverse probability weighting by f(a_t|L) of sum_a E(Y|a,M,L) f(a|L) among treated rows."""
    estimator_id = "ipw"
    fitter = fitter or DEFAULT_FITTER
    control_level = _two_levels(estimator_id, data)
    degenerate = _degenerate(estimator_id, data)
    if degenerate is not None:
        return degenerate

    scale = _Outcome(*data.outcome_range)
    treated, control = data.treated_mask, data.arm_mask(control_level)
    kappa = ExposureModel(specs.require("exposure", estimator_id), data, fitter, "exposure model P(A|L)")
    fits: Dict[str, Any] = {"exposure": kappa.summary()}
    full_spec = specs.full_outcome()
    all_rows = np.ones(data.n, dtype=bool)
    with fitting_step("outcome regression E(Y|A,M,L)"):
        full = fitter.fit(full_spec, data, scale.to_unit(data.outcome), all_rows, None, _family(full_spec))
    fits["outcome_full"] = full.summary()

    p_t = kappa.prob(data, data.arm_treated)
    _require_positive(p_t, treated, "P(A=a_t|L)")
    mixed = np.zeros(data.n)
    for level in data.exposure_levels:
        mixed = mixed + scale.from_unit(full.predict(data, {EXPOSURE_ALIAS: level})) * kappa.prob(data, level)
    inv = 1.0 / p_t[treated]
    psi = float(np.sum(inv * mixed[treated]) / np.sum(inv))
    p_treat = float(np.mean(treated))
    psi3 = (psi - p_treat * float(np.mean(data.outcome[treated]))) / float(np.mean(control))
    return _report(estimator_id, data, psi, {control_level: psi3}, None, fits)


# ---------- Registry ----------
ESTIMATORS: Dict[str, Callable[..., EstimateReport]] = {
    "wice": estimate_wice,
    "wice-nocov": estimate_wice_nocov,
    "wice-multilevel": estimate_wice_multilevel,
    "tmle": estimate_tmle,
    "itmle": estimate_itmle,
    "aipw": estimate_aipw,
    "ice": estimate_ice,
    "ipw": estimate_ipw,
}

BOUNDED_ESTIMATORS = ("wice", "wice-nocov", "wice-multilevel", "tmle", "itmle", "ice")


def run_estimator(name: str, data: Dataset, specs: NuisanceSpecs,
                  fitter: Optional[NuisanceFitter] = None) -> EstimateReport:
    try:
        estimator = ESTIMATORS[name]
    except KeyError:
        raise ConfigError(f"unknown estimator '{name}'; choose from {sorted(ESTIMATORS)}") from None
    return estimator(data, specs, fitter)
