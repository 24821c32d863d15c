import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from scipy import linalg
from scipy.special import expit
from statsmodels.discrete.discrete_model import MNLogit
from statsmodels.tools.sm_exceptions import ConvergenceWarning, PerfectSeparationWarning

import config
import utils
from data_model import DesignMatrix
from errors import (
    ColumnMismatch,
    FitError,
    InsufficientLevels,
    NonConvergence,
    RankDeficient,
    SeparationSuspected,
)

# ---------- Logging ----------
logger = utils.get_logger(__name__)

BINOMIAL = "binomial-logit"
GAUSSIAN = "gaussian-identity"
MULTINOMIAL = "multinomial-logit"


# ---------- Results ----------
@dataclass
class FitResult:
    coefficients: np.ndarray
    column_names: Tuple[str, ...]
    family_link: str
    converged: bool
    iterations: int
    final_deviance_change: float
    weighted: bool
    deviance: float = 0.0
    score_residual: float = 0.0
    separation: bool = False

    def linear_predictor(self, design: DesignMatrix, offset: Optional[np.ndarray] = None) -> np.ndarray:
        if tuple(design.column_names) != tuple(self.column_names):
            raise ColumnMismatch(f"design columns {list(design.column_names)} do not match fit {list(self.column_names)}")
        eta = design.values @ self.coefficients
        return eta if offset is None else eta + offset

    def predict(self, design: DesignMatrix, offset: Optional[np.ndarray] = None) -> np.ndarray:
        return inverse_link(self.family_link, self.linear_predictor(design, offset))

    def summary(self) -> Dict[str, Any]:
        return {
            "family_link": self.family_link,
            "coefficients": dict(zip(self.column_names, self.coefficients.tolist())),
            "converged": self.converged,
            "iterations": self.iterations,
            "final_deviance_change": self.final_deviance_change,
            "score_residual": self.score_residual,
            "weighted": self.weighted,
            "separation": self.separation,
        }


@dataclass
class MultinomialFit:
    levels: Tuple[float, ...]
    reference: float
    coefficients: np.ndarray  # (cols, k-1), one column per non-reference level
    column_names: Tuple[str, ...]
    converged: bool = True
    iterations: int = 0
    final_deviance_change: float = 0.0
    weighted: bool = False
    score_residual: float = 0.0
    separation: bool = False
    family_link: str = field(default=MULTINOMIAL)

    def predict_proba(self, design: DesignMatrix) -> np.ndarray:
        """Class probabilities, columns in ``levels`` order."""
        if tuple(design.column_names) != tuple(self.column_names):
            raise ColumnMismatch(f"design columns {list(design.column_names)} do not match fit {list(self.column_names)}")
        return _softmax_with_reference(design.values @ self.coefficients)

    def summary(self) -> Dict[str, Any]:
        return {
            "family_link": self.family_link,
            "levels": list(self.levels),
            "reference": self.reference,
            "coefficients": {
                str(lv): dict(zip(self.column_names, self.coefficients[:, j].tolist()))
                for j, lv in enumerate(self.levels[1:])
            },
            "converged": self.converged,
            "iterations": self.iterations,
            "final_deviance_change": self.final_deviance_change,
            "score_residual": self.score_residual,
            "weighted": self.weighted,
            "separation": self.separation,
        }


# ---------- Families ----------
def inverse_link(family_link: str, eta: np.ndarray) -> np.ndarray:
    if family_link == BINOMIAL:
        return expit(eta)
    if family_link == GAUSSIAN:
        return np.asarray(eta, dtype=float)
    raise FitError(f"family '{family_link}' has no scalar inverse link")


def _softmax_with_reference(eta: np.ndarray) -> np.ndarray:
    full = np.column_stack([np.zeros(eta.shape[0]), eta])
    full -= full.max(axis=1, keepdims=True)
    expo = np.exp(full)
    return expo / expo.sum(axis=1, keepdims=True)


def _family(family_link: str) -> sm.families.Family:
    if family_link == BINOMIAL:
        return sm.families.Binomial()
    if family_link == GAUSSIAN:
        return sm.families.Gaussian()
    raise FitError(f"unsupported family '{family_link}'")


def _log_caught(caught: List[warnings.WarningMessage], where: str) -> None:
    for w in caught:
        if issubclass(w.category, (ConvergenceWarning, PerfectSeparationWarning, RuntimeWarning)):
            logger.debug(f"statsmodels {w.category.__name__} in {where}: {w.message}")


# ---------- Validation ----------
def _check_inputs(design: DesignMatrix, response: np.ndarray, weights: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(response, dtype=float).reshape(-1)
    if y.shape[0] != design.rows:
        raise FitError(f"response has {y.shape[0]} rows, design has {design.rows}")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != design.rows:
        raise FitError(f"weights have {w.shape[0]} rows, design has {design.rows}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise FitError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise FitError("all weights are zero")
    if not np.all(np.isfinite(y)):
        raise FitError("response has non-finite entries")
    return y, w


def check_rank(design: DesignMatrix, weights: Optional[np.ndarray] = None) -> None:
    """Raise RankDeficient naming the dependent columns on the weighted support."""
    X = design.values
    if weights is not None:
        support = weights > 0
        X = X[support] * np.sqrt(weights[support])[:, None]
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(design.column_names[X.shape[0]:])
    _, R, pivot = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficient(design.column_names)
    rank = int(np.sum(diag > config.GLM_RANK_TOL * diag[0] * max(X.shape)))
    if rank < X.shape[1]:
        raise RankDeficient([design.column_names[j] for j in sorted(pivot[rank:])])


def _separation_detected(eta: np.ndarray, mu: np.ndarray) -> bool:
    pinned = (mu <= config.GLM_PROB_CLIP * 1e2) | (mu >= 1.0 - config.GLM_PROB_CLIP * 1e2)
    return bool(np.any(pinned & (np.abs(eta) > config.SEPARATION_ETA)))


def _handle_separation(where: str) -> None:
    message = f"quasi-separation in {where}: fitted probabilities pinned at 0 or 1"
    if config.SEPARATION_POLICY == "raise":
        raise SeparationSuspected(message)
    logger.warning(message)


# ---------- Weighted GLM ----------
def fit_weighted(
    design: DesignMatrix,
    response: np.ndarray,
    weights: Optional[np.ndarray] = None,
    family_link: str = BINOMIAL,
    offset: Optional[np.ndarray] = None,
) -> FitResult:
    """Solve sum_i w_i x_i (y_i - g^{-1}(x_i'b + offset_i)) = 0 with statsmodels IRLS.

    Weights enter as ``var_weights``. Binomial-logit accepts fractional
    responses in [0, 1].
    """
    y, w = _check_inputs(design, response, weights)
    family = _family(family_link)
    if family_link == BINOMIAL and np.any((y < 0) | (y > 1)):
        raise FitError("binomial response must lie in [0, 1]")
    support = w > 0
    X, y, w = design.values[support], y[support], w[support]
    off = np.zeros_like(y) if offset is None else np.asarray(offset, dtype=float).reshape(-1)[support]
    check_rank(DesignMatrix(X, design.column_names), w)

    where = f"{family_link} fit on {list(design.column_names)}"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = sm.GLM(y, X, family=family, offset=off, var_weights=w).fit(
                method="IRLS", maxiter=config.GLM_MAX_ITER, tol=config.GLM_DEVIANCE_TOL)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise FitError(f"{where} failed: {e}") from e
    _log_caught(caught, where)

    beta = np.asarray(result.params, dtype=float)
    eta = X @ beta + off
    mu = inverse_link(family_link, eta)
    score = float(np.max(np.abs(X.T @ (w * (y - mu)))))
    deviances = [d for d in result.fit_history["deviance"] if np.isfinite(d)]
    change = abs(deviances[-1] - deviances[-2]) if len(deviances) > 1 else 0.0
    iterations = int(result.fit_history["iteration"])
    separation = family_link == BINOMIAL and _separation_detected(eta, mu)
    if separation:
        _handle_separation(where)
    converged = bool(result.converged) or score <= config.GLM_SCORE_TOL * float(np.sum(w))
    if not converged and not separation:
        raise NonConvergence(iterations, change)
    return FitResult(beta, design.column_names, family_link, True, iterations, change,
                     weights is not None, float(result.deviance), score, separation)


def predict(fit: FitResult, design: DesignMatrix) -> np.ndarray:
    return fit.predict(design)


# ---------- One-dimensional fluctuations ----------
def fit_offset(
    offset: np.ndarray,
    response: np.ndarray,
    weights: Optional[np.ndarray] = None,
    family_link: str = BINOMIAL,
    covariate: Optional[np.ndarray] = None,
) -> float:
    """Root of sum_i w_i c_i (y_i - g^{-1}(offset_i + d c_i)) = 0 in d.

    A single-column GLM on ``covariate`` with ``offset`` held fixed;
    ``covariate`` defaults to 1 (an intercept update on a fixed offset).
    """
    off = np.asarray(offset, dtype=float).reshape(-1)
    y = np.asarray(response, dtype=float).reshape(-1)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    c = np.ones_like(y) if covariate is None else np.asarray(covariate, dtype=float).reshape(-1)
    if not (off.shape == y.shape == w.shape == c.shape):
        raise FitError("offset, response, weights and covariate must have equal length")
    if not np.all(np.isfinite(off)):
        raise FitError("offsets must be finite")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise FitError("weights must be finite and nonnegative")
    keep = (w > 0) & (c != 0)
    off, y, w, c = off[keep], y[keep], w[keep], c[keep]
    if y.size == 0:
        return 0.0
    family = _family(family_link)

    if family_link == BINOMIAL:
        # The score is monotone decreasing in d; its limits decide whether a root exists.
        limit_plus = float(np.sum(w * c * (y - (c > 0))))
        limit_minus = float(np.sum(w * c * (y - (c < 0))))
        if limit_plus >= 0 or limit_minus <= 0:
            if float(np.sum(w * c * (y - expit(off)))) == 0.0:
                return 0.0
            raise SeparationSuspected("fluctuation has no finite root: the weighted response sits at a boundary")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = sm.GLM(y, c[:, None], family=family, offset=off, var_weights=w).fit(
                method="IRLS", maxiter=config.GLM_MAX_ITER, tol=config.FLUCTUATION_TOL)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise FitError(f"fluctuation fit failed: {e}") from e
    _log_caught(caught, "fluctuation")
    if not result.converged:
        raise NonConvergence(int(result.fit_history["iteration"]), float("nan"))
    return float(np.asarray(result.params)[0])


# ---------- Multinomial ----------
class _WeightedMNLogit(MNLogit):
    """MNLogit whose log-likelihood, score and hessian carry per-row weights."""

    def __init__(self, endog: np.ndarray, exog: np.ndarray, row_weights: np.ndarray):
        super().__init__(endog, exog)
        self.row_weights = row_weights

    def loglike(self, params: np.ndarray) -> float:
        params = params.reshape(self.K, -1, order="F")
        logprob = np.log(np.clip(self.cdf(self.exog @ params), 1e-300, None))
        return float(np.sum(self.row_weights[:, None] * self.wendog * logprob))

    def score(self, params: np.ndarray) -> np.ndarray:
        params = params.reshape(self.K, -1, order="F")
        resid = (self.wendog - self.cdf(self.exog @ params))[:, 1:] * self.row_weights[:, None]
        return (resid.T @ self.exog).flatten()

    def hessian(self, params: np.ndarray) -> np.ndarray:
        params = params.reshape(self.K, -1, order="F")
        probs = self.cdf(self.exog @ params)[:, 1:]
        k, p = self.J - 1, self.K
        out = np.empty((k * p, k * p))
        for a in range(k):
            for b in range(k):
                cross = self.row_weights * probs[:, a] * ((a == b) - probs[:, b])
                out[a * p:(a + 1) * p, b * p:(b + 1) * p] = -(self.exog * cross[:, None]).T @ self.exog
        return out


def fit_multinomial(
    design: DesignMatrix,
    response: np.ndarray,
    weights: Optional[np.ndarray] = None,
    levels: Optional[Sequence[float]] = None,
) -> MultinomialFit:
    """Weighted multinomial logit by statsmodels Newton iterations; first level is the reference."""
    y, w = _check_inputs(design, response, weights)
    support = w > 0
    X, y, w = design.values[support], y[support], w[support]
    observed = sorted(set(y.tolist()))
    levels = tuple(float(v) for v in (levels if levels is not None else observed))
    if len(observed) < 2:
        raise InsufficientLevels(f"multinomial fit needs at least 2 observed levels, saw {observed}")
    unknown = set(observed) - set(levels)
    if unknown:
        raise InsufficientLevels(f"response levels {sorted(unknown)} are not among {list(levels)}")
    missing = set(levels) - set(observed)
    if missing:
        raise InsufficientLevels(f"levels {sorted(missing)} have no rows with positive weight")
    check_rank(DesignMatrix(X, design.column_names), w)

    lookup = {lv: j for j, lv in enumerate(levels)}
    codes = np.array([lookup[v] for v in y.tolist()])
    where = f"multinomial fit on {list(design.column_names)}"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = _WeightedMNLogit(codes, X, w).fit(
                method="newton", maxiter=config.GLM_MAX_ITER, tol=config.MULTINOMIAL_TOL, disp=0)
        except np.linalg.LinAlgError as e:
            raise RankDeficient(design.column_names) from e
    _log_caught(caught, where)

    beta = np.asarray(result.params, dtype=float).reshape(X.shape[1], len(levels) - 1)
    probs = _softmax_with_reference(X @ beta)
    onehot = np.column_stack([(codes == j).astype(float) for j in range(len(levels))])
    score = float(np.max(np.abs(X.T @ (w[:, None] * (onehot - probs)[:, 1:]))))
    retvals = result.mle_retvals
    iterations = int(retvals.get("iterations", config.GLM_MAX_ITER))
    pinned = bool(np.any(probs < config.GLM_PROB_CLIP * 1e2))
    if pinned:
        _handle_separation(where)
    converged = bool(retvals.get("converged", False)) or score <= config.GLM_SCORE_TOL * float(np.sum(w))
    if not converged and not pinned:
        raise NonConvergence(iterations, float("nan"))
    return MultinomialFit(levels, levels[0], beta, design.column_names, True, iterations,
                          0.0, weights is not None, score, pinned)
