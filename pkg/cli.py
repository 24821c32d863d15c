"""Command line: ``python cli.py {estimate,simulate,oracle}``.

Exit codes: 0 success, 1 oracle gap above tolerance, 2 configuration error,
3 data error, 4 estimation failure.
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

import config
import utils
from data_model import Schema, load_csv
from eif import WeightForm
from errors import ConfigError, DataError, FrontdoorError
from estimators import ESTIMATORS, pairwise_specs, run_estimator
from inference import CONTRASTS, bootstrap_ci, contrast
from oracle import decomposition_exact, frontdoor_exact, interventional_mean_exact, interventional_mean_mc, marginalize
from simulation import SPEC_FIELDS, apply_overrides, build_study, metrics_frame, resolve_model, run_study, write_metrics

# ---------- Logging ----------
logger = utils.get_logger(__name__)


# ---------- Configuration ----------
class EstimateConfig(BaseModel):
    """Resolved settings of an ``estimate`` run; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    data: str
    covariates: List[str] = Field(default_factory=list)
    categorical: List[str] = Field(default_factory=list)
    exposure: str = "A"
    mediator: str = "M"
    outcome: str = "Y"
    treated: float = 1.0
    control: Optional[List[float]] = None
    estimator: str = "wice"
    models: Dict[str, str] = Field(default_factory=dict)
    weight_form: str = WeightForm.DENSITY.value
    bootstrap: int = 0
    contrast: Optional[str] = None
    contrast_levels: Optional[List[float]] = None
    level: float = config.CONFIDENCE_LEVEL
    seed: int = config.DEFAULT_SEED
    workers: int = config.DEFAULT_WORKERS
    out: str = os.path.join(config.OUTPUT_DIR, "estimate.json")

    @field_validator("estimator")
    @classmethod
    def _known_estimator(cls, v: str) -> str:
        if v not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {sorted(ESTIMATORS)}")
        return v

    @field_validator("models")
    @classmethod
    def _known_models(cls, v: Dict[str, str]) -> Dict[str, str]:
        unknown = set(v) - set(SPEC_FIELDS)
        if unknown:
            raise ValueError(f"unknown nuisance models {sorted(unknown)}; expected {list(SPEC_FIELDS)}")
        return v

    @field_validator("weight_form")
    @classmethod
    def _known_form(cls, v: str) -> str:
        return WeightForm(v).value

    @field_validator("contrast")
    @classmethod
    def _known_contrast(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in CONTRASTS:
            raise ValueError(f"contrast must be one of {CONTRASTS}")
        return v


def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        payload = utils.read_json(path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return payload


def _flags(args: argparse.Namespace, names: List[str]) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def resolve_estimate_config(args: argparse.Namespace) -> EstimateConfig:
    """Config file first, command-line flags on top."""
    payload = _read_config(args.config)
    payload.update(_flags(args, [
        "data", "covariates", "categorical", "exposure", "mediator", "outcome", "treated", "control",
        "estimator", "weight_form", "bootstrap", "contrast", "contrast_levels", "level", "seed", "workers", "out",
    ]))
    models = dict(payload.get("models", {}))
    models.update({name: getattr(args, f"{name}_model") for name in SPEC_FIELDS
                   if getattr(args, f"{name}_model", None) is not None})
    if models:
        payload["models"] = models
    try:
        return EstimateConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"invalid estimate configuration: {e}") from e


# ---------- Commands ----------
def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = resolve_estimate_config(args)
    schema = Schema(tuple(cfg.covariates), cfg.exposure, cfg.mediator, cfg.outcome, tuple(cfg.categorical))
    try:
        data = load_csv(cfg.data, schema, cfg.treated, cfg.control)
    except OSError as e:
        raise DataError(f"cannot read data file {cfg.data}: {e}") from e
    specs = apply_overrides(pairwise_specs(data.covariate_names, cfg.weight_form), cfg.models)

    report = run_estimator(cfg.estimator, data, specs)
    report.seed = cfg.seed
    output: Dict[str, Any] = report.to_dict()
    output["specs"] = specs.to_dict()
    if cfg.bootstrap:
        output["bootstrap"] = bootstrap_ci(data, cfg.estimator, specs, cfg.bootstrap, cfg.seed, cfg.level,
                                           cfg.workers).to_dict()
    if cfg.contrast:
        levels = tuple(cfg.contrast_levels) if cfg.contrast_levels else None
        output["contrast"] = contrast(data, cfg.estimator, specs, cfg.contrast, cfg.bootstrap or 1000,
                                      cfg.seed, levels, cfg.level, cfg.workers).to_dict()
    settings = cfg.model_dump()
    output["config"] = settings
    output["provenance"] = utils.provenance(settings)
    utils.write_json(output, cfg.out)
    se = f"{report.se:.6f}" if report.se is not None else "n/a"
    print(f"{cfg.estimator}: psi={report.psi_hat:.6f} se={se} within_bounds={report.within_bounds} -> {cfg.out}")
    return config.EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    payload = _read_config(args.config)
    if not payload:
        raise ConfigError("simulate needs --config with a study definition")
    study = build_study(payload, args.replications, args.sample_sizes, args.workers, args.seed)
    rows = run_study(study.model, study.scenarios, study.truth, study.workers, study.treated)
    out_dir = args.out or config.OUTPUT_DIR
    csv_path, json_path = write_metrics(rows, out_dir, study.settings)
    print(metrics_frame(rows).to_string(index=False))
    print(f"truth={study.truth:.6f}; wrote {csv_path} and {json_path}")
    return config.EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    model = resolve_model(args.model)
    treated = args.treated
    result: Dict[str, Any] = {"model": model.name, "treated": treated, "seed": args.seed}
    code = config.EXIT_OK
    if model.is_discrete:
        law = marginalize(model)
        frontdoor = frontdoor_exact(law, treated)
        intervened = interventional_mean_exact(model, treated)
        gap = abs(frontdoor - intervened)
        decomposition = decomposition_exact(law, treated)
        result.update({
            "frontdoor": frontdoor,
            "interventional_mean": intervened,
            "gap": gap,
            "tolerance": config.ORACLE_GAP_TOL,
            "psi3": decomposition.psi3,
            "p_treated": decomposition.p_treated,
        })
        if gap > config.ORACLE_GAP_TOL:
            logger.warning(f"Oracle gap {gap:.3e} on '{model.name}' exceeds {config.ORACLE_GAP_TOL:.0e}")
            code = config.EXIT_GAP
        print(f"{model.name}: frontdoor={frontdoor:.12f} intervened={intervened:.12f} gap={gap:.3e}")
    else:
        mean, se = interventional_mean_mc(model, treated, args.draws, args.seed)
        result.update({"frontdoor": None, "interventional_mean": mean, "mc_se": se, "draws": args.draws})
        print(f"{model.name}: intervened mean (Monte Carlo, {args.draws} draws) = {mean:.6f} (se {se:.2e})")
    result["provenance"] = utils.provenance(result)
    if args.out:
        utils.write_json(result, args.out)
    return code


# ---------- Parser ----------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Intervening-variable (frontdoor) mean estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate psi on a CSV dataset")
    est.add_argument("--config", help="JSON file with estimate settings; flags override it")
    est.add_argument("--data", help="CSV input")
    est.add_argument("--covariates", nargs="*")
    est.add_argument("--categorical", nargs="*")
    est.add_argument("--exposure")
    est.add_argument("--mediator")
    est.add_argument("--outcome")
    est.add_argument("--treated", type=float)
    est.add_argument("--control", type=float, nargs="+")
    est.add_argument("--estimator", choices=sorted(ESTIMATORS))
    est.add_argument("--weight-form", dest="weight_form", choices=[f.value for f in WeightForm])
    est.add_argument("--exposure-model", dest="exposure_model", metavar="FORMULA", help="P(A|L) terms")
    est.add_argument("--exposure-mediator-model", dest="exposure_mediator_model", metavar="FORMULA",
                     help="P(A|M,L) terms")
    est.add_argument("--mediator-model", dest="mediator_model", metavar="FORMULA", help="f(M|A,L) terms")
    est.add_argument("--b0", dest="outcome_model", metavar="FORMULA", help="b0(M,L) terms")
    est.add_argument("--projection", dest="projection_model", metavar="FORMULA", help="h(L) terms")
    est.add_argument("--outcome-full", dest="outcome_full_model", metavar="FORMULA", help="E(Y|A,M,L) terms (IPW)")
    est.add_argument("--bootstrap", type=int, metavar="B")
    est.add_argument("--contrast", choices=CONTRASTS)
    est.add_argument("--contrast-levels", dest="contrast_levels", type=float, nargs=2)
    est.add_argument("--level", type=float)
    est.add_argument("--seed", type=int)
    est.add_argument("--workers", type=int)
    est.add_argument("--out")
    est.set_defaults(handler=cmd_estimate)

    sim = sub.add_parser("simulate", help="run a replication study")
    sim.add_argument("--config", required=True, help="JSON study definition")
    sim.add_argument("--replications", type=int)
    sim.add_argument("--sample-sizes", dest="sample_sizes", type=int, nargs="+")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(handler=cmd_simulate)

    orc = sub.add_parser("oracle", help="check identification on a structural model")
    orc.add_argument("--model", required=True, help="builtin model name or model JSON path")
    orc.add_argument("--treated", type=float, default=1.0)
    orc.add_argument("--draws", type=int, default=config.MC_CHUNK)
    orc.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    orc.add_argument("--out")
    orc.set_defaults(handler=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except FrontdoorError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e}")
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
