"""Exception hierarchy shared by every layer of the toolkit."""

from typing import Any, Optional, Sequence

import config


class FrontdoorError(Exception):
    """Base class; ``exit_code`` is what the command line returns for it."""

    exit_code = config.EXIT_ESTIMATION


# ---------- Configuration ----------
class ConfigError(FrontdoorError):
    exit_code = config.EXIT_CONFIG


# ---------- Data ----------
class DataError(FrontdoorError):
    exit_code = config.EXIT_DATA


class MissingColumn(DataError):
    def __init__(self, column: str):
        super().__init__(f"column '{column}' is missing from the input")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, column: str, row: int, value: Any):
        super().__init__(f"column '{column}' row {row}: non-numeric value {value!r}")
        self.column = column
        self.row = row


class MissingValue(DataError):
    def __init__(self, column: str, row: int):
        super().__init__(f"column '{column}' row {row}: missing value")
        self.column = column
        self.row = row


class UnknownArmLevel(DataError):
    def __init__(self, column: str, level: Any, row: Optional[int] = None):
        where = f" row {row}" if row is not None else ""
        super().__init__(f"column '{column}'{where}: level {level!r} is not a declared arm")
        self.column = column
        self.level = level
        self.row = row


class SchemaError(DataError):
    pass


class TermSyntaxError(DataError):
    pass


class UnknownTerm(DataError):
    def __init__(self, name: str):
        super().__init__(f"term refers to unknown column '{name}'")
        self.name = name


# ---------- Model fitting ----------
class FitError(FrontdoorError):
    pass


class NonConvergence(FitError):
    def __init__(self, iterations: int, deviance_change: float):
        super().__init__(
            f"no convergence after {iterations} iterations (relative deviance change {deviance_change:.3e})"
        )
        self.iterations = iterations
        self.deviance_change = deviance_change


class RankDeficient(FitError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"design is rank deficient on the weighted support; dependent columns: {list(columns)}")
        self.columns = list(columns)


class SeparationSuspected(FitError):
    pass


class ColumnMismatch(FitError):
    pass


class InsufficientLevels(FitError):
    pass


# ---------- Estimation ----------
class EstimationError(FrontdoorError):
    pass


class NuisanceNonConvergence(EstimationError):
    def __init__(self, step: str, cause: Exception):
        super().__init__(f"nuisance fit failed at step '{step}': {cause}")
        self.step = step
        self.cause = cause


class PositivityViolation(EstimationError):
    def __init__(self, quantity: str, minimum: float, threshold: float):
        super().__init__(
            f"positivity violated: fitted {quantity} reaches {minimum:.3e} (threshold {threshold:.0e})"
        )
        self.quantity = quantity
        self.minimum = minimum


class SingleArm(EstimationError):
    pass


class ArmTooSmall(EstimationError):
    def __init__(self, level: Any, rows: int, needed: int):
        super().__init__(f"arm {level!r} has {rows} rows; the regression needs at least {needed}")
        self.level = level
        self.rows = rows
        self.needed = needed


class UnsupportedMediator(EstimationError):
    pass


class UnsupportedExposure(EstimationError):
    pass


class FluctuationNonConvergence(EstimationError):
    pass


class IterationLimit(EstimationError):
    def __init__(self, iterations: int, delta: float, nu: float):
        super().__init__(f"iterative targeting stopped after {iterations} iterations (|delta|={delta:.2e}, |nu|={nu:.2e})")
        self.iterations = iterations


# ---------- Influence functions ----------
class EIFError(FrontdoorError):
    pass


class InvalidProbability(EIFError):
    pass


class InvalidSubmodel(EIFError):
    pass


# ---------- Oracle ----------
class OracleError(FrontdoorError):
    pass


class ContinuousVariable(OracleError):
    def __init__(self, variable: str):
        super().__init__(f"variable '{variable}' is continuous; use the Monte Carlo oracle")
        self.variable = variable


class OraclePositivityViolation(OracleError):
    def __init__(self, cell: Any):
        super().__init__(f"positivity fails at cell {cell}")
        self.cell = cell


class ModelStructureError(OracleError):
    exit_code = config.EXIT_CONFIG


# ---------- Inference ----------
class InferenceError(FrontdoorError):
    pass


class TooManyFailures(InferenceError):
    def __init__(self, failed: int, total: int):
        super().__init__(f"{failed} of {total} bootstrap replicates failed")
        self.failed = failed
        self.total = total
