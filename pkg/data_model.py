"""Observed-data container, CSV I/O and the design-matrix term language.

A model formula is a ``+``-separated list of terms. Each term is a ``:``-joined
product of factors; a factor is a column name, optionally raised to an integer
power (``L1^2``) or complemented (``(1-L1)``). ``A`` and ``M`` are aliases for
the exposure and mediator columns. An intercept is implicit and is removed by
``-1`` or ``0``::

    ModelSpec.parse("L1 + L2 + L1:L2")        # (Intercept, L1, L2, L1:L2)
    ModelSpec.parse("L2:(1-L1)")              # (Intercept, (1-L1):L2)
    ModelSpec.parse("A + M + A:M - 1")        # no intercept
"""

import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import config
import utils
from errors import (
    MissingColumn,
    MissingValue,
    NonNumericCell,
    SchemaError,
    TermSyntaxError,
    UnknownArmLevel,
    UnknownTerm,
)

# ---------- Logging ----------
logger = utils.get_logger(__name__)

FAMILIES = ("binomial-logit", "gaussian-identity", "multinomial-logit")
RESPONSE_ROLES = ("outcome", "exposure", "mediator", "pseudo-outcome")
EXPOSURE_ALIAS = "A"
MEDIATOR_ALIAS = "M"
INTERCEPT = "Intercept"
_MISSING_TOKENS = {"", "na", "nan", "null", "none"}
_NAME = r"[A-Za-z_][A-Za-z0-9_.\[\]]*"
_FACTOR_RE = re.compile(rf"^(?:\(1-(?P<comp>{_NAME})\)|(?P<name>{_NAME}))(?:\^(?P<power>\d+))?$")


# ---------- Dataset ----------
def _frozen(values: Sequence, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rectangular observations (L, A, M, Y) plus arm metadata.

    ``arm_control`` holds one level for two-arm analyses and every non-treated
    level for multi-level exposures.
    """

    covariates: np.ndarray
    exposure: np.ndarray
    mediator: np.ndarray
    outcome: np.ndarray
    arm_treated: float
    arm_control: Tuple[float, ...]
    covariate_names: Tuple[str, ...] = ()
    exposure_levels: Tuple[float, ...] = ()
    exposure_name: str = "A"
    mediator_name: str = "M"
    outcome_name: str = "Y"

    def __post_init__(self):
        exposure = _frozen(self.exposure).reshape(-1)
        n = exposure.shape[0]
        if n < 1:
            raise SchemaError("dataset must contain at least one row")
        covariates = np.array(self.covariates, dtype=float)
        covariates = np.empty((n, 0)) if covariates.size == 0 else covariates.reshape(n, -1)
        covariates.setflags(write=False)
        object.__setattr__(self, "exposure", exposure)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "mediator", _frozen(self.mediator).reshape(-1))
        object.__setattr__(self, "outcome", _frozen(self.outcome).reshape(-1))
        for name, col in (("mediator", self.mediator), ("outcome", self.outcome)):
            if col.shape[0] != n:
                raise SchemaError(f"{name} has {col.shape[0]} rows, exposure has {n}")
        names = tuple(self.covariate_names)
        if covariates.shape[1] != len(names):
            raise SchemaError(f"{covariates.shape[1]} covariate columns but {len(names)} covariate names")
        object.__setattr__(self, "covariate_names", names)
        for label, arr in (("covariates", covariates), ("exposure", exposure),
                           ("mediator", self.mediator), ("outcome", self.outcome)):
            if not np.all(np.isfinite(arr)):
                row = int(np.argwhere(~np.isfinite(arr))[0][0]) + 1
                raise MissingValue(label, row)

        levels = tuple(float(v) for v in (self.exposure_levels or sorted(set(exposure.tolist()))))
        object.__setattr__(self, "exposure_levels", levels)
        bad = np.setdiff1d(exposure, np.array(levels))
        if bad.size:
            row = int(np.argwhere(exposure == bad[0])[0][0]) + 1
            raise UnknownArmLevel(self.exposure_name, bad[0].item(), row)
        treated = float(self.arm_treated)
        control = self.arm_control
        if control is None or (isinstance(control, tuple) and len(control) == 0):
            control = tuple(lv for lv in levels if lv != treated)
        elif np.isscalar(control):
            control = (control,)
        control = tuple(float(c) for c in control)
        for level in (treated,) + control:
            if level not in levels:
                raise UnknownArmLevel(self.exposure_name, level)
        if treated in control:
            raise SchemaError(f"treated level {treated!r} also declared as control")
        if not control:
            raise SchemaError("at least one control level is required")
        object.__setattr__(self, "arm_treated", treated)
        object.__setattr__(self, "arm_control", control)

    # ----- shape and views -----
    @property
    def n(self) -> int:
        return int(self.exposure.shape[0])

    @property
    def treated_mask(self) -> np.ndarray:
        return self.exposure == self.arm_treated

    def arm_mask(self, level: float) -> np.ndarray:
        return self.exposure == float(level)

    @property
    def has_covariates(self) -> bool:
        return len(self.covariate_names) > 0

    @property
    def outcome_range(self) -> Tuple[float, float]:
        return float(self.outcome.min()), float(self.outcome.max())

    @property
    def is_binary_outcome(self) -> bool:
        return bool(np.all((self.outcome == 0) | (self.outcome == 1)))

    @property
    def mediator_levels(self) -> Optional[Tuple[float, ...]]:
        """Support of M when it is discrete, None for a continuous mediator."""
        values = np.unique(self.mediator)
        if values.size <= config.MEDIATOR_MAX_LEVELS and np.all(values == np.round(values)):
            return tuple(float(v) for v in values)
        return None

    def column(self, name: str) -> np.ndarray:
        if name in (EXPOSURE_ALIAS, self.exposure_name):
            return self.exposure
        if name in (MEDIATOR_ALIAS, self.mediator_name):
            return self.mediator
        if name in ("Y", self.outcome_name):
            return self.outcome
        if name in self.covariate_names:
            return self.covariates[:, self.covariate_names.index(name)]
        raise UnknownTerm(name)

    def frame(self) -> pd.DataFrame:
        data = {name: self.covariates[:, j] for j, name in enumerate(self.covariate_names)}
        data[self.exposure_name] = self.exposure
        data[self.mediator_name] = self.mediator
        data[self.outcome_name] = self.outcome
        return pd.DataFrame(data)

    # ----- derived datasets -----
    def take(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            covariates=self.covariates[rows],
            exposure=self.exposure[rows],
            mediator=self.mediator[rows],
            outcome=self.outcome[rows],
        )

    def with_arms(self, treated: float, control: Union[float, Sequence[float], None] = None) -> "Dataset":
        return replace(self, arm_treated=treated, arm_control=control if control is not None else ())

    def with_outcome(self, outcome: Sequence[float]) -> "Dataset":
        return replace(self, outcome=np.asarray(outcome, dtype=float))

    def equals(self, other: "Dataset") -> bool:
        if not isinstance(other, Dataset):
            return False
        meta = ("covariate_names", "exposure_levels", "arm_treated", "arm_control",
                "exposure_name", "mediator_name", "outcome_name")
        if any(getattr(self, m) != getattr(other, m) for m in meta):
            return False
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("covariates", "exposure", "mediator", "outcome")
        )


# ---------- CSV I/O ----------
@dataclass(frozen=True)
class Schema:
    """Column-role map; ``categorical`` covariates are dummy coded at load time."""

    covariates: Tuple[str, ...]
    exposure: str
    mediator: str
    outcome: str
    categorical: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        roles = list(self.covariates) + [self.exposure, self.mediator, self.outcome]
        seen = set()
        for name in roles:
            if name in seen:
                raise SchemaError(f"column '{name}' is assigned more than one role")
            seen.add(name)
        reserved = {EXPOSURE_ALIAS, MEDIATOR_ALIAS} & set(self.covariates)
        if reserved:
            raise SchemaError(f"covariate names {sorted(reserved)} are reserved for the exposure/mediator aliases")
        extra = set(self.categorical) - set(self.covariates)
        if extra:
            raise SchemaError(f"categorical columns {sorted(extra)} are not covariates")


def _parse_numeric(raw: pd.Series, column: str) -> np.ndarray:
    values = np.empty(len(raw), dtype=float)
    for i, cell in enumerate(raw.tolist()):
        text = str(cell).strip()
        if text.lower() in _MISSING_TOKENS:
            raise MissingValue(column, i + 1)
        try:
            values[i] = float(text)
        except ValueError:
            raise NonNumericCell(column, i + 1, cell) from None
        if not np.isfinite(values[i]):
            raise NonNumericCell(column, i + 1, cell)
    return values


def _dummy_code(raw: pd.Series, column: str) -> Tuple[List[str], np.ndarray]:
    cells = [str(c).strip() for c in raw.tolist()]
    for i, text in enumerate(cells):
        if text.lower() in _MISSING_TOKENS:
            raise MissingValue(column, i + 1)
    codes = pd.Categorical(cells, categories=sorted(set(cells)))
    dummies = pd.get_dummies(codes, drop_first=True, dtype=float)
    names = [f"{column}[T.{level}]" for level in dummies.columns]
    return names, dummies.to_numpy(dtype=float)


def load_csv(path: str, schema: Schema, treated: float,
             control: Union[float, Sequence[float], None] = None) -> Dataset:
    """Read a UTF-8 CSV with a header row into a validated Dataset (row order kept)."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [c.strip() for c in frame.columns]
    for name in list(schema.covariates) + [schema.exposure, schema.mediator, schema.outcome]:
        if name not in frame.columns:
            raise MissingColumn(name)

    cov_names: List[str] = []
    cov_blocks: List[np.ndarray] = []
    for name in schema.covariates:
        if name in schema.categorical:
            names, block = _dummy_code(frame[name], name)
            cov_names.extend(names)
            cov_blocks.append(block)
        else:
            cov_names.append(name)
            cov_blocks.append(_parse_numeric(frame[name], name)[:, None])
    n = len(frame)
    covariates = np.hstack(cov_blocks) if cov_blocks else np.empty((n, 0))
    exposure = _parse_numeric(frame[schema.exposure], schema.exposure)

    declared = [float(treated)] + [float(c) for c in np.atleast_1d(control)] if control is not None else [float(treated)]
    observed = set(exposure.tolist())
    if float(treated) not in observed:
        raise UnknownArmLevel(schema.exposure, treated)
    if control is not None:
        unknown = observed - set(declared)
        if unknown:
            level = sorted(unknown)[0]
            raise UnknownArmLevel(schema.exposure, level, int(np.argmax(exposure == level)) + 1)
        for level in declared[1:]:
            if level not in observed:
                raise UnknownArmLevel(schema.exposure, level)

    data = Dataset(
        covariates=covariates,
        exposure=exposure,
        mediator=_parse_numeric(frame[schema.mediator], schema.mediator),
        outcome=_parse_numeric(frame[schema.outcome], schema.outcome),
        arm_treated=treated,
        arm_control=tuple(np.atleast_1d(control).tolist()) if control is not None else (),
        covariate_names=tuple(cov_names),
        exposure_levels=tuple(sorted(observed)),
        exposure_name=schema.exposure,
        mediator_name=schema.mediator,
        outcome_name=schema.outcome,
    )
    logger.info(f"Loaded {path}: n={data.n}, covariates={list(data.covariate_names)}, "
                f"arms={data.arm_treated} vs {list(data.arm_control)}")
    return data


def save_csv(data: Dataset, path: str) -> None:
    """Write a Dataset so that ``load_csv`` reproduces it bit for bit."""
    frame = data.frame()
    text = pd.DataFrame({c: [repr(float(v)) for v in frame[c].to_numpy()] for c in frame.columns})
    text.to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Saved {data.n} rows to {path}")


# ---------- Term language ----------
@dataclass(frozen=True, order=True)
class Factor:
    name: str
    complement: bool = False
    power: int = 1

    @property
    def label(self) -> str:
        base = f"(1-{self.name})" if self.complement else self.name
        return base if self.power == 1 else f"{base}^{self.power}"


@dataclass(frozen=True)
class Term:
    factors: Tuple[Factor, ...]

    @classmethod
    def of(cls, factors: Iterable[Factor]) -> "Term":
        merged: Dict[Tuple[str, bool], int] = {}
        for f in factors:
            key = (f.name, f.complement)
            merged[key] = merged.get(key, 0) + f.power
        return cls(tuple(sorted(Factor(name, comp, power) for (name, comp), power in merged.items())))

    @property
    def label(self) -> str:
        return ":".join(f.label for f in self.factors)

    @property
    def variables(self) -> Tuple[str, ...]:
        return tuple(f.name for f in self.factors)


def _split_top_level(formula: str) -> List[Tuple[str, str]]:
    """Split on + and - outside parentheses, returning (sign, token) pairs."""
    pieces: List[Tuple[str, str]] = []
    depth, sign, start = 0, "+", 0
    for i, ch in enumerate(formula):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise TermSyntaxError(f"unbalanced parenthesis in '{formula}'")
        elif ch in "+-" and depth == 0:
            pieces.append((sign, formula[start:i]))
            sign, start = ch, i + 1
    if depth != 0:
        raise TermSyntaxError(f"unbalanced parenthesis in '{formula}'")
    pieces.append((sign, formula[start:]))
    return pieces


def _parse_factor(token: str) -> Factor:
    match = _FACTOR_RE.match(token)
    if not match:
        raise TermSyntaxError(f"cannot parse factor '{token}'")
    power = int(match.group("power") or 1)
    if power < 1:
        raise TermSyntaxError(f"power must be a positive integer in '{token}'")
    if match.group("comp"):
        return Factor(match.group("comp"), True, power)
    return Factor(match.group("name"), False, power)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative regression model: response role, family/link and ordered terms."""

    terms: Tuple[Term, ...] = ()
    intercept: bool = True
    family_link: str = "binomial-logit"
    response_role: str = "outcome"

    def __post_init__(self):
        if self.family_link not in FAMILIES:
            raise TermSyntaxError(f"unknown family/link '{self.family_link}'")
        if self.response_role not in RESPONSE_ROLES:
            raise TermSyntaxError(f"unknown response role '{self.response_role}'")
        labels = [t.label for t in self.terms]
        dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
        if dupes:
            raise TermSyntaxError(f"duplicate terms after canonical ordering: {dupes}")
        if not self.intercept and not self.terms:
            raise TermSyntaxError("model has neither an intercept nor any terms")

    @classmethod
    def parse(cls, formula: str, family_link: str = "binomial-logit",
              response_role: str = "outcome") -> "ModelSpec":
        text = re.sub(r"\s+", "", formula or "")
        if "~" in text:
            text = text.split("~", 1)[1]
        intercept = True
        terms: List[Term] = []
        for sign, token in _split_top_level(text):
            if token == "":
                if sign == "-":
                    raise TermSyntaxError(f"dangling '-' in '{formula}'")
                continue
            if token in ("0", "1"):
                intercept = token == "1" and sign == "+"
                continue
            if sign == "-":
                raise TermSyntaxError(f"only '-1' may be subtracted, got '-{token}' in '{formula}'")
            terms.append(Term.of(_parse_factor(f) for f in token.split(":")))
        return cls(tuple(terms), intercept, family_link, response_role)

    @property
    def formula(self) -> str:
        parts = (["1"] if self.intercept else []) + [t.label for t in self.terms]
        out = " + ".join(parts)
        return out if self.intercept else (out + " - 1")

    @property
    def variables(self) -> Tuple[str, ...]:
        seen: List[str] = []
        for term in self.terms:
            for name in term.variables:
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def uses(self, name: str) -> bool:
        return name in self.variables

    def with_family(self, family_link: str, response_role: Optional[str] = None) -> "ModelSpec":
        return replace(self, family_link=family_link, response_role=response_role or self.response_role)

    def __str__(self) -> str:
        return self.formula


# ---------- Design matrices ----------
@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    column_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, ndmin=2)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if values.shape[1] != len(self.column_names):
            raise SchemaError(f"{values.shape[1]} columns but {len(self.column_names)} names")
        if not np.all(np.isfinite(values)):
            col = int(np.argwhere(~np.isfinite(values))[0][1])
            raise SchemaError(f"design column '{self.column_names[col]}' has non-finite entries")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    def take(self, rows: Union[np.ndarray, Sequence[int]]) -> "DesignMatrix":
        return DesignMatrix(self.values[rows], self.column_names)


Override = Union[float, np.ndarray]


def _factor_columns(factor: Factor, data: Dataset, overrides: Mapping[str, Override]) -> List[Tuple[str, np.ndarray]]:
    n = data.n
    if factor.name in (EXPOSURE_ALIAS, data.exposure_name):
        raw = overrides.get(EXPOSURE_ALIAS, data.exposure)
        codes = np.broadcast_to(np.asarray(raw, dtype=float), (n,))
        reference = data.exposure_levels[0]
        if len(data.exposure_levels) == 2 and data.exposure_levels == (0.0, 1.0):
            columns = [(EXPOSURE_ALIAS, codes.astype(float))]
        else:
            columns = [(f"{EXPOSURE_ALIAS}[T.{_level_label(lv)}]", (codes == lv).astype(float))
                       for lv in data.exposure_levels if lv != reference]
    elif factor.name in (MEDIATOR_ALIAS, data.mediator_name):
        raw = overrides.get(MEDIATOR_ALIAS, data.mediator)
        columns = [(MEDIATOR_ALIAS, np.broadcast_to(np.asarray(raw, dtype=float), (n,)).astype(float))]
    elif factor.name in data.covariate_names:
        columns = [(factor.name, data.column(factor.name))]
    else:
        raise UnknownTerm(factor.name)
    out = []
    for label, col in columns:
        value = 1.0 - col if factor.complement else col
        label = f"(1-{label})" if factor.complement else label
        if factor.power != 1:
            value = value ** factor.power
            label = f"{label}^{factor.power}"
        out.append((label, value))
    return out


def _level_label(level: float) -> str:
    return str(int(level)) if float(level).is_integer() else repr(level)


def build_design(spec: ModelSpec, data: Dataset, overrides: Optional[Mapping[str, Override]] = None) -> DesignMatrix:
    """Expand ``spec`` on ``data``; ``overrides`` replaces the A and/or M columns.

    Columns come out as (Intercept, terms in spec order). A factor on an exposure
    with levels other than {0, 1} expands into one dummy per non-reference level.
    """
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in (EXPOSURE_ALIAS, MEDIATOR_ALIAS):
            raise UnknownTerm(key)
    names: List[str] = []
    cols: List[np.ndarray] = []
    if spec.intercept:
        names.append(INTERCEPT)
        cols.append(np.ones(data.n))
    for term in spec.terms:
        expanded: List[Tuple[str, np.ndarray]] = [("", np.ones(data.n))]
        for factor in term.factors:
            expanded = [
                (f"{lab}:{flab}" if lab else flab, val * fval)
                for lab, val in expanded
                for flab, fval in _factor_columns(factor, data, overrides)
            ]
        for lab, val in expanded:
            names.append(lab)
            cols.append(val)
    values = np.column_stack(cols) if cols else np.empty((data.n, 0))
    return DesignMatrix(values, tuple(names))


def parse_term(label: str) -> Term:
    """Parse a single ``:``-joined product, e.g. ``L1:L2`` or ``L2:(1-L1)``."""
    text = re.sub(r"\s+", "", label)
    if not text:
        raise TermSyntaxError("empty term")
    return Term.of(_parse_factor(f) for f in text.split(":"))


def evaluate_term(term: Term, values: Mapping[str, np.ndarray]) -> np.ndarray:
    """Product of the term's factors over named value arrays."""
    out: Union[float, np.ndarray] = 1.0
    for factor in term.factors:
        if factor.name not in values:
            raise UnknownTerm(factor.name)
        col = np.asarray(values[factor.name], dtype=float)
        col = 1.0 - col if factor.complement else col
        out = out * (col ** factor.power if factor.power != 1 else col)
    return np.asarray(out, dtype=float)
