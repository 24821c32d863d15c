import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm

import config
import utils
from data_model import Dataset
from errors import InvalidProbability, InvalidSubmodel
from oracle import DiscreteLaw, decomposition_exact, frontdoor_exact

# ---------- Logging ----------
logger = utils.get_logger(__name__)


class WeightForm(str, Enum):
    """How the mediator weight W1 is represented.

    PROPENSITY: P(a_c|L) P(a_t|M,L) / {P(a_t|L) P(a_c|M,L)}
    DENSITY:    f(M|a_t,L) / f(M|a_c,L)
    """

    PROPENSITY = "propensity-ratio"
    DENSITY = "density-ratio"


# ---------- Nuisance values ----------
@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Per-row nuisance evaluations for one control level.

    ``p_treated`` is the marginal P(A=a_t); the conditional probabilities are
    P(a_t|L), P(a_c|L), P(a_t|M,L), P(a_c|M,L), and ``density_ratio`` is
    f(M|a_t,L)/f(M|a_c,L). Without covariates the L-conditionals are constant.
    """

    b0: np.ndarray
    h: np.ndarray
    psi3: float
    psi: float
    p_treated: float
    p_treated_l: Optional[np.ndarray] = None
    p_control_l: Optional[np.ndarray] = None
    p_treated_ml: Optional[np.ndarray] = None
    p_control_ml: Optional[np.ndarray] = None
    density_ratio: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("p_treated_l", "p_control_l", "p_treated_ml", "p_control_ml"):
            value = getattr(self, name)
            if value is not None:
                arr = np.asarray(value, dtype=float)
                if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
                    raise InvalidProbability(f"{name} has values outside [0, 1]")
        if not 0 <= self.p_treated <= 1:
            raise InvalidProbability(f"p_treated={self.p_treated} is outside [0, 1]")
        if self.density_ratio is not None:
            ratio = np.asarray(self.density_ratio, dtype=float)
            if np.any(np.isnan(ratio)) or np.any(ratio < 0):
                raise InvalidProbability("density ratio must be nonnegative")

    def w2(self, rows: np.ndarray) -> np.ndarray:
        """P(a_c|L)/P(a_t|L) on ``rows``."""
        den = np.asarray(self.p_treated_l, dtype=float)[rows]
        if np.any(den <= 0):
            raise InvalidProbability("P(A=a_t|L) is zero on a treated row")
        return np.asarray(self.p_control_l, dtype=float)[rows] / den

    def w1(self, rows: np.ndarray, form: WeightForm) -> np.ndarray:
        """Mediator weight on ``rows`` (control rows) in the requested representation."""
        form = WeightForm(form)
        if form is WeightForm.DENSITY:
            if self.density_ratio is None:
                raise InvalidProbability("density-ratio weights need f(M|a_t,L)/f(M|a_c,L)")
            return np.asarray(self.density_ratio, dtype=float)[rows]
        if self.p_treated_ml is None or self.p_control_ml is None:
            raise InvalidProbability("propensity-ratio weights need P(A|M,L)")
        den = np.asarray(self.p_treated_l, dtype=float)[rows] * np.asarray(self.p_control_ml, dtype=float)[rows]
        if np.any(den <= 0):
            raise InvalidProbability("P(A=a_t|L) P(A=a_c|M,L) is zero on a control row")
        num = np.asarray(self.p_control_l, dtype=float)[rows] * np.asarray(self.p_treated_ml, dtype=float)[rows]
        return num / den


# ---------- Influence functions ----------
def _block(is_treated: np.ndarray, is_control: np.ndarray, y: np.ndarray,
           nv: NuisanceValues, form: WeightForm) -> np.ndarray:
    """Terms of one control level, everything except I(a_t)Y - psi."""
    out = np.zeros(y.shape[0])
    b0 = np.asarray(nv.b0, dtype=float)
    h = np.asarray(nv.h, dtype=float)
    c = np.flatnonzero(is_control)
    t = np.flatnonzero(is_treated)
    if c.size:
        out[c] = nv.psi3 + nv.w1(c, form) * (y[c] - b0[c]) + (h[c] - nv.psi3)
    if t.size:
        out[t] = nv.w2(t) * (b0[t] - h[t])
    return out


def eif_generalized(is_treated: np.ndarray, is_control: np.ndarray, y: np.ndarray,
                    nuisance: NuisanceValues, form: WeightForm = WeightForm.PROPENSITY) -> np.ndarray:
    """Efficient influence function of the generalized frontdoor mean, one value per row.

    I(a_t)Y + I(a_c)psi3 + I(a_c)W1(Y - b0) + I(a_t)W2(b0 - h) + I(a_c)(h - psi3) - psi
    """
    y = np.asarray(y, dtype=float)
    is_treated = np.asarray(is_treated, dtype=bool)
    return np.where(is_treated, y, 0.0) + _block(is_treated, np.asarray(is_control, dtype=bool), y,
                                                 nuisance, form) - nuisance.psi


def eif_nocov(is_treated: np.ndarray, is_control: np.ndarray, y: np.ndarray,
              nuisance: NuisanceValues, form: WeightForm = WeightForm.PROPENSITY) -> np.ndarray:
    """Influence function of the covariate-free frontdoor mean.

    P(a|L) collapses to the marginal P(a) and h to the constant psi3, so both
    representations reduce to the generalized one.
    """
    n = np.asarray(y).shape[0]
    p_t = nuisance.p_treated
    p_c = 1.0 - p_t if nuisance.p_control_l is None else float(np.asarray(nuisance.p_control_l).reshape(-1)[0])
    filled = replace(
        nuisance,
        h=np.full(n, nuisance.psi3),
        p_treated_l=np.full(n, p_t),
        p_control_l=np.full(n, p_c),
    )
    return eif_generalized(is_treated, is_control, y, filled, form)


def eif_multilevel(exposure: np.ndarray, treated: float, y: np.ndarray,
                   blocks: Mapping[float, NuisanceValues], psi: float,
                   form: WeightForm = WeightForm.PROPENSITY) -> np.ndarray:
    """Sum over control levels of their blocks; a row only activates its own arm's terms."""
    exposure = np.asarray(exposure, dtype=float)
    y = np.asarray(y, dtype=float)
    is_treated = exposure == float(treated)
    out = np.where(is_treated, y, 0.0) - psi
    for level, nv in blocks.items():
        out = out + _block(is_treated, exposure == float(level), y, nv, form)
    return out


# ---------- Variance ----------
def variance_from_influence(phi: np.ndarray) -> float:
    """P_n[phi^2]/n, no degrees-of-freedom correction."""
    phi = np.asarray(phi, dtype=float)
    return float(np.mean(phi ** 2) / phi.shape[0])


def influence_values(data: Dataset, nuisance: Union[NuisanceValues, Mapping[float, NuisanceValues]],
                     form: WeightForm = WeightForm.PROPENSITY) -> np.ndarray:
    if isinstance(nuisance, NuisanceValues):
        control = data.arm_control[0]
        return eif_generalized(data.treated_mask, data.arm_mask(control), data.outcome, nuisance, form)
    psi = next(iter(nuisance.values())).psi
    return eif_multilevel(data.exposure, data.arm_treated, data.outcome, nuisance, psi, form)


def sandwich_variance(data: Dataset, nuisance: Union[NuisanceValues, Mapping[float, NuisanceValues]],
                      form: WeightForm = WeightForm.PROPENSITY) -> float:
    """Sandwich variance of the estimate carried in ``nuisance.psi``."""
    return variance_from_influence(influence_values(data, nuisance, form))


def wald_interval(psi: float, variance: float, level: float = config.CONFIDENCE_LEVEL) -> Tuple[float, float]:
    z = float(norm.ppf(0.5 + level / 2.0))
    se = math.sqrt(max(variance, 0.0))
    return psi - z * se, psi + z * se


# ---------- Exact nuisances on a discrete law ----------
@dataclass(frozen=True, eq=False)
class LawEvaluation:
    """Cell-level inputs for influence-function enumeration (positive cells only)."""

    law: DiscreteLaw
    treated: float
    is_treated: np.ndarray
    exposure: np.ndarray
    y: np.ndarray
    blocks: Dict[float, NuisanceValues]
    psi: float


def _positive(law: DiscreteLaw) -> DiscreteLaw:
    keep = law.probs > 0
    if np.all(keep):
        return law
    probs = law.probs[keep]
    return DiscreteLaw(law.variables, law.cells[keep], probs / probs.sum(), law.covariates,
                       law.exposure, law.mediator, law.outcome)


def nuisance_from_law(law: DiscreteLaw, treated: float,
                      control: Optional[Sequence[float]] = None) -> LawEvaluation:
    """Exact b0, h, propensities and density ratios at every positive cell."""
    law = _positive(law)
    t = law.tensor()
    li, ai, mi = t.cell_index[:, 0], t.cell_index[:, 1], t.cell_index[:, 2]
    p_lam = t.probs.sum(axis=3)
    p_la = p_lam.sum(axis=2)
    p_l = p_la.sum(axis=1)
    p_lm = p_lam.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ey = (t.probs * t.outcome_values).sum(axis=3) / p_lam
        f_m = p_lam / p_la[:, :, None]  # f(m|a,l)
    i_t = t.index_of_exposure(treated)
    decomposition = decomposition_exact(law, treated, control)
    exposure = law.column(law.exposure)
    y = law.column(law.outcome)
    blocks: Dict[float, NuisanceValues] = {}
    for level, psi3 in decomposition.psi3.items():
        j = t.index_of_exposure(level)
        support = f_m[:, i_t, :] > 0
        h_l = np.where(support, np.nan_to_num(ey[:, j, :]) * np.nan_to_num(f_m[:, i_t, :]), 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = f_m[li, i_t, mi] / f_m[li, j, mi]
        blocks[level] = NuisanceValues(
            b0=ey[li, j, mi],
            h=h_l[li],
            psi3=psi3,
            psi=decomposition.psi,
            p_treated=decomposition.p_treated,
            p_treated_l=p_la[li, i_t] / p_l[li],
            p_control_l=p_la[li, j] / p_l[li],
            p_treated_ml=p_lam[li, i_t, mi] / p_lm[li, mi],
            p_control_ml=p_lam[li, j, mi] / p_lm[li, mi],
            density_ratio=np.where(exposure == float(level), ratio, np.nan_to_num(ratio, nan=0.0, posinf=0.0)),
        )
    return LawEvaluation(law, float(treated), exposure == float(treated), exposure, y, blocks, decomposition.psi)


def law_influence(evaluation: LawEvaluation, form: WeightForm = WeightForm.PROPENSITY,
                  blocks: Optional[Mapping[float, NuisanceValues]] = None,
                  psi: Optional[float] = None) -> np.ndarray:
    blocks = evaluation.blocks if blocks is None else blocks
    psi = evaluation.psi if psi is None else psi
    return eif_multilevel(evaluation.exposure, evaluation.treated, evaluation.y, blocks, psi, form)


def expected_eif(law: DiscreteLaw, treated: float, control: Optional[Sequence[float]] = None,
                 form: WeightForm = WeightForm.PROPENSITY,
                 blocks: Optional[Mapping[float, NuisanceValues]] = None,
                 psi: Optional[float] = None) -> float:
    """E[phi] by enumeration; ``blocks``/``psi`` substitute (possibly wrong) nuisances."""
    evaluation = nuisance_from_law(law, treated, control)
    return evaluation.law.expectation(law_influence(evaluation, form, blocks, psi))


def efficiency_bound(law: DiscreteLaw, treated: float, control: Optional[Sequence[float]] = None,
                     form: WeightForm = WeightForm.PROPENSITY) -> float:
    evaluation = nuisance_from_law(law, treated, control)
    return evaluation.law.variance(law_influence(evaluation, form))


# ---------- Pathwise derivative check ----------
def centered_direction(law: DiscreteLaw, values: np.ndarray) -> np.ndarray:
    """Score direction g - E[g] (perturbs the joint law along g)."""
    values = np.asarray(values, dtype=float)
    return values - law.expectation(values)


def conditional_tilt(law: DiscreteLaw, values: np.ndarray, given: Sequence[str]) -> np.ndarray:
    """Score g - E[g | given]: tilts the conditional law of the rest given ``given``."""
    values = np.asarray(values, dtype=float)
    return values - np.nan_to_num(law.conditional_mean(values, given))


def perturb(law: DiscreteLaw, direction: np.ndarray, t: float) -> DiscreteLaw:
    direction = np.asarray(direction, dtype=float)
    if direction.shape != law.probs.shape:
        raise InvalidSubmodel(f"direction has {direction.size} entries, law has {law.size} cells")
    if abs(law.expectation(direction)) > 1e-12:
        raise InvalidSubmodel("direction is not mean zero under the law")
    probs = law.probs * (1.0 + t * direction)
    if np.any(probs < 0):
        raise InvalidSubmodel(f"perturbation with t={t} leaves the probability simplex")
    return law.with_probs(probs / probs.sum())


def verify_pathwise_derivative(law: DiscreteLaw, direction: np.ndarray, h: float, treated: float,
                               form: WeightForm = WeightForm.PROPENSITY) -> Tuple[float, float, float]:
    """(central difference of psi along p(1+tS), E[phi S], their gap) at step ``h``."""
    direction = np.asarray(direction, dtype=float)
    upper = perturb(law, direction, h)
    lower = perturb(law, direction, -h)
    lhs = (frontdoor_exact(upper, treated) - frontdoor_exact(lower, treated)) / (2.0 * h)
    keep = law.probs > 0
    evaluation = nuisance_from_law(law, treated)
    rhs = evaluation.law.expectation(law_influence(evaluation, form) * direction[keep])
    return float(lhs), float(rhs), float(abs(lhs - rhs))


@dataclass(frozen=True)
class DerivativeCheck:
    steps: Tuple[float, ...]
    lhs: Tuple[float, ...]
    rhs: float
    gaps: Tuple[float, ...]
    richardson: float
    quadratic: bool


def derivative_ladder(law: DiscreteLaw, direction: np.ndarray, treated: float,
                      steps: Sequence[float] = config.DERIVATIVE_STEPS,
                      form: WeightForm = WeightForm.PROPENSITY, floor: float = 1e-10) -> DerivativeCheck:
    """Run the step ladder and judge whether the gap decays like h^2.

    Gaps under ``floor`` count as converged (round-off dominates there).
    """
    results = [verify_pathwise_derivative(law, direction, h, treated, form) for h in steps]
    lhs = tuple(r[0] for r in results)
    gaps = tuple(r[2] for r in results)
    rhs = results[0][1]
    ratio = steps[0] / steps[1]
    richardson = (ratio ** 2 * lhs[1] - lhs[0]) / (ratio ** 2 - 1.0)
    quadratic = True
    for (h1, g1), (h2, g2) in zip(zip(steps, gaps), zip(steps[1:], gaps[1:])):
        if g1 <= floor:
            continue
        if g2 > max(4.0 * g1 * (h2 / h1) ** 2, floor):
            quadratic = False
    logger.debug(f"derivative ladder gaps {gaps}, richardson {richardson:.3e}, rhs {rhs:.3e}")
    return DerivativeCheck(tuple(steps), lhs, rhs, gaps, float(richardson), quadratic)
