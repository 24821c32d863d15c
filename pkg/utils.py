import hashlib
import json
import logging
import math
import os
import subprocess
from typing import Any, Dict, Optional

import numpy as np

import config


# ---------- Logging ----------
def get_logger(name: str) -> logging.Logger:
    """Module logger writing to ``<LOG_DIR>/<module>.log`` in append mode.

    Setting FRONTDOOR_LOG_DIR to an empty string keeps records in memory only
    (they still propagate to the root logger).
    """
    logger = logging.getLogger(name)
    logger.setLevel(config.LOG_LEVEL)
    if getattr(logger, "_frontdoor_configured", False):
        return logger
    if config.LOG_DIR:
        try:
            os.makedirs(config.LOG_DIR, exist_ok=True)
            module = name.rsplit(".", 1)[-1] or "frontdoor"
            handler = logging.FileHandler(
                os.path.join(config.LOG_DIR, f"{module}.log"), mode="a", encoding="utf-8"
            )
            handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
            logger.addHandler(handler)
        except OSError as e:
            logging.getLogger(__name__).warning(f"File logging disabled for {name}: {e}")
    logger._frontdoor_configured = True
    return logger


logger = get_logger(__name__)


# ---------- Random streams ----------
def rng_stream(seed: int, *stream_ids: int) -> np.random.Generator:
    """Counter-based Philox generator for the stream (seed, *stream_ids).

    Stream ids used across the toolkit:
      (seed, n, replication)  simulation datasets
      (seed, replicate)       bootstrap resamples
      (seed, block)           chunked Monte Carlo draws
    The same key gives the same draws on every platform and worker.
    """
    key = [int(seed)] + [int(s) for s in stream_ids]
    if any(k < 0 for k in key):
        raise ValueError(f"stream key must be non-negative: {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------- Provenance ----------
def git_commit() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git lookup failed: {e}")
    return "unknown"


def provenance(resolved_config: Dict[str, Any]) -> Dict[str, Any]:
    """Stamp attached to every emitted report."""
    blob = json.dumps(to_jsonable(resolved_config), sort_keys=True).encode("utf-8")
    return {
        "version": config.VERSION,
        "config_sha1": hashlib.sha1(blob).hexdigest(),
        "git_commit": git_commit(),
    }


# ---------- JSON ----------
def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON output."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def write_json(obj: Any, path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, indent=2)
    logger.info(f"Wrote {path}")


def read_json(path: str) -> Optional[Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
