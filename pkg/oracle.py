"""Ground truth for the intervening-variable mean.

Two views of the same quantity are computed here:

* ``frontdoor_exact`` evaluates the frontdoor functional
  sum_{m,l} f(m|a_t,l) f(l) sum_a E(Y|l,a,m) f(a|l) on a finite observed law.
* ``interventional_mean_exact`` / ``interventional_mean_mc`` run the structural
  model with the mediator drawn under A = a_t while Y keeps the natural A.

When the structural model satisfies the dismissible-component conditions the
two agree exactly; ``dismissibility_violation_model`` in ``simulation`` breaks them.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.special import expit

import config
import utils
from data_model import INTERCEPT, Dataset, Term, evaluate_term, parse_term
from errors import (
    ConfigError,
    ContinuousVariable,
    ModelStructureError,
    OraclePositivityViolation,
)

# ---------- Logging ----------
logger = utils.get_logger(__name__)

ROLES = ("covariate", "exposure", "mediator", "outcome", "latent")
DISTRIBUTIONS = ("bernoulli", "normal", "constant")
LINKS = ("expit", "identity")


# ---------- Discrete laws ----------
@dataclass(frozen=True, eq=False)
class LawTensor:
    """A law laid out on the grid (L configuration, A, M, Y)."""

    covariate_configs: np.ndarray  # (nl, p)
    exposure_levels: np.ndarray
    mediator_levels: np.ndarray
    outcome_values: np.ndarray
    probs: np.ndarray  # (nl, na, nm, ny)
    cell_index: np.ndarray  # (cells, 4): position of every law cell on the grid

    def index_of_exposure(self, level: float) -> int:
        hits = np.flatnonzero(self.exposure_levels == float(level))
        if hits.size == 0:
            raise OraclePositivityViolation({"A": level})
        return int(hits[0])


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Joint probability table over finitely supported variables.

    ``cells`` holds one configuration per row (columns in ``variables`` order);
    ``probs`` the matching probabilities.
    """

    variables: Tuple[str, ...]
    cells: np.ndarray
    probs: np.ndarray
    covariates: Tuple[str, ...] = ()
    exposure: str = "A"
    mediator: str = "M"
    outcome: str = "Y"

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float, ndmin=2)
        probs = np.array(self.probs, dtype=float).reshape(-1)
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if cells.shape != (probs.shape[0], len(self.variables)):
            raise ModelStructureError(f"cells {cells.shape} do not match {probs.shape[0]} probabilities "
                                      f"over {len(self.variables)} variables")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ModelStructureError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > config.LAW_SUM_TOL * max(1, probs.shape[0]):
            raise ModelStructureError(f"probabilities sum to {probs.sum():.15f}, not 1")
        for name in (self.exposure, self.mediator, self.outcome) + self.covariates:
            if name not in self.variables:
                raise ModelStructureError(f"role variable '{name}' is not in the law")
        cells.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "probs", probs)

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.cells[:, self.variables.index(name)]

    def expectation(self, values: np.ndarray) -> float:
        return float(np.sum(self.probs * np.asarray(values, dtype=float)))

    def variance(self, values: np.ndarray) -> float:
        mean = self.expectation(values)
        return self.expectation((np.asarray(values, dtype=float) - mean) ** 2)

    def group_sum(self, names: Sequence[str], values: np.ndarray) -> np.ndarray:
        """Sum of ``values`` over cells sharing this cell's values of ``names``."""
        if not names:
            return np.full(self.size, float(np.sum(values)))
        keys = self.cells[:, [self.variables.index(n) for n in names]]
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        return np.bincount(inverse, weights=values)[inverse]

    def marginal(self, names: Sequence[str]) -> np.ndarray:
        return self.group_sum(names, self.probs)

    def conditional_mean(self, values: np.ndarray, given: Sequence[str]) -> np.ndarray:
        """Per-cell E(values | given); NaN where the conditioning event has probability 0."""
        num = self.group_sum(given, self.probs * values)
        den = self.marginal(given)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)

    def with_probs(self, probs: np.ndarray) -> "DiscreteLaw":
        return DiscreteLaw(self.variables, self.cells, probs, self.covariates,
                           self.exposure, self.mediator, self.outcome)

    def frame(self) -> pd.DataFrame:
        out = pd.DataFrame(self.cells, columns=list(self.variables))
        out["probability"] = self.probs
        return out

    def tensor(self) -> LawTensor:
        cov_idx = [self.variables.index(c) for c in self.covariates]
        cov = self.cells[:, cov_idx] if cov_idx else np.zeros((self.size, 0))
        configs, l_inv = (np.unique(cov, axis=0, return_inverse=True) if cov_idx
                          else (np.zeros((1, 0)), np.zeros(self.size, dtype=int)))
        a_levels, a_inv = np.unique(self.column(self.exposure), return_inverse=True)
        m_levels, m_inv = np.unique(self.column(self.mediator), return_inverse=True)
        y_values, y_inv = np.unique(self.column(self.outcome), return_inverse=True)
        probs = np.zeros((configs.shape[0], a_levels.size, m_levels.size, y_values.size))
        index = np.column_stack([np.reshape(i, -1) for i in (l_inv, a_inv, m_inv, y_inv)]).astype(int)
        np.add.at(probs, tuple(index.T), self.probs)
        return LawTensor(configs, a_levels, m_levels, y_values, probs, index)

    @classmethod
    def empirical(cls, data: Dataset) -> "DiscreteLaw":
        """Empirical law of a Dataset with discrete columns (one cell per distinct row)."""
        names = tuple(data.covariate_names) + ("A", "M", "Y")
        rows = np.column_stack([data.covariates, data.exposure, data.mediator, data.outcome])
        cells, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(names, cells, counts / counts.sum(), tuple(data.covariate_names))


@dataclass(frozen=True)
class Decomposition:
    p_treated: float
    treated_mean: float
    psi3: Dict[float, float]
    p_control: Dict[float, float]
    psi: float


def _frontdoor_blocks(law: DiscreteLaw):
    t = law.tensor()
    p_lam = t.probs.sum(axis=3)
    with np.errstate(invalid="ignore", divide="ignore"):
        ey = np.where(p_lam > 0, (t.probs * t.outcome_values).sum(axis=3) / np.where(p_lam > 0, p_lam, 1.0), np.nan)
    p_la = p_lam.sum(axis=2)
    p_l = p_la.sum(axis=1)
    keep = p_l > 0
    return t, p_lam[keep], ey[keep], p_la[keep], p_l[keep], t.covariate_configs[keep]


def _mediator_given_treated(t: LawTensor, p_lam, p_la, configs, treated: float) -> np.ndarray:
    i = t.index_of_exposure(treated)
    missing = np.flatnonzero(p_la[:, i] <= 0)
    if missing.size:
        raise OraclePositivityViolation({"L": configs[missing[0]].tolist(), "A": treated})
    return p_lam[:, i, :] / p_la[:, i, None]


def _require_defined(ey: np.ndarray, needed: np.ndarray, t: LawTensor, configs: np.ndarray, a_index=None) -> None:
    bad = np.argwhere(needed & np.isnan(ey))
    if bad.size:
        loc = bad[0]
        l_idx, rest = loc[0], loc[1:]
        cell = {"L": configs[l_idx].tolist()}
        if a_index is None:
            cell["A"] = float(t.exposure_levels[rest[0]])
            cell["M"] = float(t.mediator_levels[rest[1]])
        else:
            cell["A"] = float(t.exposure_levels[a_index])
            cell["M"] = float(t.mediator_levels[rest[0]])
        raise OraclePositivityViolation(cell)


def frontdoor_exact(law: DiscreteLaw, treated: float) -> float:
    """Exact frontdoor functional on a finite observed law."""
    t, p_lam, ey, p_la, p_l, configs = _frontdoor_blocks(law)
    f_m = _mediator_given_treated(t, p_lam, p_la, configs, treated)
    f_a = p_la / p_l[:, None]
    needed = (f_m[:, None, :] > 0) & (f_a[:, :, None] > 0)
    _require_defined(ey, needed, t, configs)
    inner = np.nansum(np.where(needed, ey * f_a[:, :, None], 0.0), axis=1)
    return float(np.sum(f_m * p_l[:, None] * inner))


def decomposition_exact(law: DiscreteLaw, treated: float, control: Optional[Sequence[float]] = None) -> Decomposition:
    """P(a_t), E(Y|a_t), per-control psi3 and the frontdoor value as their weighted sum."""
    t, p_lam, ey, p_la, p_l, configs = _frontdoor_blocks(law)
    f_m = _mediator_given_treated(t, p_lam, p_la, configs, treated)
    i_t = t.index_of_exposure(treated)
    p_a = p_la.sum(axis=0)
    p_treated = float(p_a[i_t])
    treated_mean = float(np.nansum(np.where(p_lam[:, i_t] > 0, ey[:, i_t] * p_lam[:, i_t], 0.0)) / p_treated)
    levels = [float(a) for a in t.exposure_levels if float(a) != float(treated)] if control is None else [float(c) for c in control]
    psi3: Dict[float, float] = {}
    p_control: Dict[float, float] = {}
    psi = p_treated * treated_mean
    for level in levels:
        j = t.index_of_exposure(level)
        p_control[level] = float(p_a[j])
        if p_a[j] <= 0:
            psi3[level] = float("nan")
            continue
        f_l_given_a = p_la[:, j] / p_a[j]
        needed = (f_m > 0) & (f_l_given_a[:, None] > 0)
        _require_defined(ey[:, j, :], needed, t, configs, a_index=j)
        psi3[level] = float(np.sum(np.where(needed, ey[:, j, :] * f_m * f_l_given_a[:, None], 0.0)))
        psi += p_control[level] * psi3[level]
    return Decomposition(p_treated, treated_mean, psi3, p_control, float(psi))


# ---------- Structural models ----------
@dataclass(frozen=True)
class Equation:
    variable: str
    distribution: str = "bernoulli"
    link: str = "expit"
    terms: Tuple[Tuple[str, float], ...] = ()
    sd: float = 1.0
    role: str = "covariate"

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ModelStructureError(f"{self.variable}: unknown distribution '{self.distribution}'")
        if self.link not in LINKS:
            raise ModelStructureError(f"{self.variable}: unknown link '{self.link}'")
        if self.role not in ROLES:
            raise ModelStructureError(f"{self.variable}: unknown role '{self.role}'")
        object.__setattr__(self, "terms", tuple((str(k), float(v)) for k, v in dict(self.terms).items()))

    @property
    def parsed_terms(self) -> List[Tuple[Optional[Term], float]]:
        return [(None if label in ("1", INTERCEPT) else parse_term(label), coef) for label, coef in self.terms]

    @property
    def parents(self) -> Tuple[str, ...]:
        seen: List[str] = []
        for term, _ in self.parsed_terms:
            for name in (term.variables if term else ()):
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    @property
    def is_discrete(self) -> bool:
        return self.distribution in ("bernoulli", "constant")

    def mean(self, values: Mapping[str, np.ndarray], size: int) -> np.ndarray:
        eta = np.zeros(size)
        for term, coef in self.parsed_terms:
            eta = eta + coef * (1.0 if term is None else evaluate_term(term, values))
        return expit(eta) if self.link == "expit" else eta

    def support(self) -> Tuple[float, ...]:
        if self.distribution == "bernoulli":
            return (0.0, 1.0)
        if self.distribution == "constant":
            value = sum(coef for label, coef in self.terms if label in ("1", INTERCEPT))
            return (float(expit(value)) if self.link == "expit" else float(value),)
        raise ContinuousVariable(self.variable)


@dataclass(frozen=True)
class StructuralModel:
    """Ordered generative equations; each equation sees only earlier variables."""

    equations: Tuple[Equation, ...]
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "equations", tuple(self.equations))
        defined: List[str] = []
        for eq in self.equations:
            if eq.variable in defined:
                raise ModelStructureError(f"variable '{eq.variable}' defined twice")
            for parent in eq.parents:
                if parent not in defined:
                    raise ModelStructureError(
                        f"equation for '{eq.variable}' references '{parent}' before it is generated"
                    )
            defined.append(eq.variable)
        for role in ("exposure", "mediator", "outcome"):
            count = sum(eq.role == role for eq in self.equations)
            if count != 1:
                raise ModelStructureError(f"model '{self.name}' needs exactly one {role}, found {count}")

    # ----- roles -----
    def _role(self, role: str) -> str:
        return next(eq.variable for eq in self.equations if eq.role == role)

    @property
    def exposure(self) -> str:
        return self._role("exposure")

    @property
    def mediator(self) -> str:
        return self._role("mediator")

    @property
    def outcome(self) -> str:
        return self._role("outcome")

    @property
    def covariates(self) -> Tuple[str, ...]:
        return tuple(eq.variable for eq in self.equations if eq.role == "covariate")

    @property
    def latents(self) -> Tuple[str, ...]:
        return tuple(eq.variable for eq in self.equations if eq.role == "latent")

    @property
    def observed(self) -> Tuple[str, ...]:
        return tuple(eq.variable for eq in self.equations if eq.role != "latent")

    @property
    def is_discrete(self) -> bool:
        return all(eq.is_discrete for eq in self.equations)

    def supports(self) -> Dict[str, Tuple[float, ...]]:
        """Support of every variable; a constant equation with parents takes the values its parents produce."""
        out: Dict[str, Tuple[float, ...]] = {}
        for eq in self.equations:
            if eq.distribution == "constant" and eq.parents:
                grid = np.array(list(itertools.product(*(out[p] for p in eq.parents))), dtype=float)
                parents = {p: grid[:, i] for i, p in enumerate(eq.parents)}
                values = np.round(eq.mean(parents, grid.shape[0]), 12)
                out[eq.variable] = tuple(float(v) for v in np.unique(values))
            else:
                out[eq.variable] = eq.support()
        return out

    def exposure_levels(self) -> Tuple[float, ...]:
        try:
            return self.supports()[self.exposure]
        except ContinuousVariable:
            return ()

    # ----- simulation -----
    def sample(self, n: int, rng: np.random.Generator, treated: Optional[float] = None) -> pd.DataFrame:
        """Draw ``n`` rows in topological order.

        With ``treated`` set, the mediator equation sees A = treated while the
        outcome equation keeps the naturally drawn A.
        """
        values: Dict[str, np.ndarray] = {}
        for eq in self.equations:
            parents = values
            if treated is not None and eq.role == "mediator":
                parents = dict(values)
                parents[self.exposure] = np.full(n, float(treated))
            mean = eq.mean(parents, n)
            if eq.distribution == "bernoulli":
                values[eq.variable] = (rng.random(n) < mean).astype(float)
            elif eq.distribution == "normal":
                values[eq.variable] = mean + eq.sd * rng.standard_normal(n)
            else:
                values[eq.variable] = np.broadcast_to(mean, (n,)).astype(float)
        return pd.DataFrame({eq.variable: values[eq.variable] for eq in self.equations})

    def enumerate(self, treated: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Every configuration of the variables with its probability (discrete models only)."""
        for eq in self.equations:
            if not eq.is_discrete:
                raise ContinuousVariable(eq.variable)
        supports = self.supports()
        cells = np.array(list(itertools.product(*(supports[eq.variable] for eq in self.equations))), dtype=float)
        size = cells.shape[0]
        values = {eq.variable: cells[:, j] for j, eq in enumerate(self.equations)}
        probs = np.ones(size)
        for j, eq in enumerate(self.equations):
            parents = values
            if treated is not None and eq.role == "mediator":
                parents = dict(values)
                parents[self.exposure] = np.full(size, float(treated))
            mean = eq.mean(parents, size)
            if eq.distribution == "bernoulli":
                probs = probs * np.where(cells[:, j] == 1.0, mean, 1.0 - mean)
            elif eq.distribution == "constant":
                probs = probs * np.isclose(cells[:, j], mean, rtol=0.0, atol=1e-12)
        return cells, probs

    # ----- serialization -----
    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "equations": [
                {
                    "variable": eq.variable,
                    "role": eq.role,
                    "distribution": eq.distribution,
                    "link": eq.link,
                    "terms": dict(eq.terms),
                    **({"sd": eq.sd} if eq.distribution == "normal" else {}),
                }
                for eq in self.equations
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StructuralModel":
        try:
            parsed = ModelFile.model_validate(payload)
        except ValidationError as e:
            raise ConfigError(f"invalid structural model: {e}") from e
        return cls(
            tuple(
                Equation(e.variable, e.distribution, e.link, tuple(e.terms.items()), e.sd, e.role)
                for e in parsed.equations
            ),
            parsed.name,
        )


class EquationFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variable: str
    role: str = "covariate"
    distribution: str = "bernoulli"
    link: str = "expit"
    terms: Dict[str, float] = Field(default_factory=dict)
    sd: float = 1.0

    @field_validator("distribution")
    @classmethod
    def _known_distribution(cls, v: str) -> str:
        if v not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        return v

    @field_validator("role")
    @classmethod
    def _known_role(cls, v: str) -> str:
        if v not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        return v


class ModelFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "model"
    equations: List[EquationFile]


def load_model(path: str) -> StructuralModel:
    model = StructuralModel.from_dict(utils.read_json(path))
    logger.info(f"Loaded structural model '{model.name}' from {path}")
    return model


def save_model(model: StructuralModel, path: str) -> None:
    utils.write_json(model.to_dict(), path)


# ---------- Oracle operations ----------
def marginalize(model: StructuralModel) -> DiscreteLaw:
    """Observed-data law over (L, A, M, Y) with the latent variables summed out."""
    cells, probs = model.enumerate()
    observed_idx = [j for j, eq in enumerate(model.equations) if eq.role != "latent"]
    keys, inverse = np.unique(cells[:, observed_idx], axis=0, return_inverse=True)
    summed = np.bincount(inverse.reshape(-1), weights=probs, minlength=keys.shape[0])
    return DiscreteLaw(
        model.observed, keys, summed, model.covariates,
        model.exposure, model.mediator, model.outcome,
    )


def interventional_mean_exact(model: StructuralModel, treated: float) -> float:
    """E(Y) when the mediator is generated under A = treated and Y keeps the natural A."""
    cells, probs = model.enumerate(treated=treated)
    y = cells[:, [eq.variable for eq in model.equations].index(model.outcome)]
    return float(np.sum(probs * y))


def interventional_mean_mc(model: StructuralModel, treated: float, draws: int,
                           seed: int = config.DEFAULT_SEED) -> Tuple[float, float]:
    """Monte Carlo intervened mean and its standard error.

    Draws run in blocks of ``config.MC_CHUNK``; block b uses stream (seed, b).
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    total, total_sq, done, block = 0.0, 0.0, 0, 0
    while done < draws:
        size = min(config.MC_CHUNK, draws - done)
        y = model.sample(size, utils.rng_stream(seed, block), treated=treated)[model.outcome].to_numpy()
        total += float(np.sum(y))
        total_sq += float(np.sum(y * y))
        done += size
        block += 1
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0) * draws / max(draws - 1, 1)
    se = math.sqrt(var / draws)
    logger.info(f"MC intervened mean for '{model.name}' at A={treated}: {mean:.6f} (se {se:.2e}, {draws} draws)")
    return mean, se
