"""Nonparametric bootstrap percentile intervals and paired-resample contrasts."""

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

import config
import utils
from data_model import Dataset
from errors import ConfigError, FrontdoorError, TooManyFailures
from estimators import NuisanceFitter, NuisanceSpecs, run_estimator

# ---------- Logging ----------
logger = utils.get_logger(__name__)

CONTRASTS = ("ey-minus-psi", "psi-diff")


@dataclass
class BootstrapResult:
    point: float
    replicates: np.ndarray
    ci: Tuple[float, float]
    failed: int
    B: int
    level: float = config.CONFIDENCE_LEVEL
    kind: str = "estimate"

    @property
    def se(self) -> float:
        return float(np.std(self.replicates, ddof=1)) if self.replicates.size > 1 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "point": self.point,
            "ci": list(self.ci),
            "level": self.level,
            "bootstrap_se": self.se,
            "B": self.B,
            "failed": self.failed,
        }


def percentile_interval(values: Sequence[float], level: float = config.CONFIDENCE_LEVEL) -> Tuple[float, float]:
    """Percentile interval, linear interpolation between order statistics at (B+1)p."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no replicate values")
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [tail, 1.0 - tail], method="weibull")
    return float(lo), float(hi)


# ---------- Statistics ----------
Statistic = Callable[[Dataset], float]


def _estimate(estimator_id: str, specs: NuisanceSpecs, fitter: Optional[NuisanceFitter]) -> Statistic:
    def statistic(data: Dataset) -> float:
        return run_estimator(estimator_id, data, specs, fitter).psi_hat
    return statistic


def _contrast(estimator_id: str, specs: NuisanceSpecs, kind: str, levels: Tuple[float, float],
              fitter: Optional[NuisanceFitter]) -> Statistic:
    psi = _estimate(estimator_id, specs, fitter)

    def statistic(data: Dataset) -> float:
        if kind == "ey-minus-psi":
            return float(np.mean(data.outcome)) - psi(data.with_arms(levels[0]))
        if levels[0] == levels[1]:
            return 0.0
        return psi(data.with_arms(levels[0])) - psi(data.with_arms(levels[1]))
    return statistic


def _replicate(statistic: Statistic, data: Dataset, seed: int, b: int) -> Optional[float]:
    rows = utils.rng_stream(seed, b).integers(0, data.n, size=data.n)
    try:
        return statistic(data.take(rows))
    except FrontdoorError as e:
        logger.error(f"Bootstrap replicate {b} failed: {e}")
        return None


def _bootstrap(statistic: Statistic, data: Dataset, B: int, seed: int, level: float,
               workers: int, kind: str) -> BootstrapResult:
    if B < 2:
        raise ConfigError(f"bootstrap needs B >= 2, got {B}")
    point = statistic(data)
    values = Parallel(n_jobs=workers)(delayed(_replicate)(statistic, data, seed, b) for b in range(B))
    kept = np.array([v for v in values if v is not None], dtype=float)
    failed = B - kept.size
    if failed > config.BOOTSTRAP_MAX_FAILURE * B or kept.size == 0:
        raise TooManyFailures(failed, B)
    ci = percentile_interval(kept, level)
    logger.info(f"Bootstrap {kind}: point={point:.6f} ci=({ci[0]:.6f}, {ci[1]:.6f}) B={B} failed={failed}")
    return BootstrapResult(point, kept, ci, failed, B, level, kind)


def bootstrap_ci(data: Dataset, estimator_id: str, specs: NuisanceSpecs, B: int = 1000,
                 seed: int = config.DEFAULT_SEED, level: float = config.CONFIDENCE_LEVEL,
                 workers: int = config.DEFAULT_WORKERS, fitter: Optional[NuisanceFitter] = None) -> BootstrapResult:
    """Percentile CI from B row resamples; resample b uses the stream (seed, b)."""
    return _bootstrap(_estimate(estimator_id, specs, fitter), data, B, seed, level, workers, "estimate")


def contrast(data: Dataset, estimator_id: str, specs: NuisanceSpecs, kind: str = "ey-minus-psi",
             B: int = 1000, seed: int = config.DEFAULT_SEED, levels: Optional[Tuple[float, float]] = None,
             level: float = config.CONFIDENCE_LEVEL, workers: int = config.DEFAULT_WORKERS,
             fitter: Optional[NuisanceFitter] = None) -> BootstrapResult:
    """Paired bootstrap of a contrast; both terms are computed on the same resample.

    ``ey-minus-psi``: mean(Y) - psi with the intervening variable set to ``levels[0]``.
    ``psi-diff``: psi at ``levels[0]`` minus psi at ``levels[1]``.
    ``levels`` defaults to (treated arm, first control arm).
    """
    if kind not in CONTRASTS:
        raise ConfigError(f"contrast must be one of {CONTRASTS}, got '{kind}'")
    if levels is None:
        levels = (data.arm_treated, data.arm_control[0])
    levels = (float(levels[0]), float(levels[1]))
    return _bootstrap(_contrast(estimator_id, specs, kind, levels, fitter), data, B, seed, level, workers, kind)
