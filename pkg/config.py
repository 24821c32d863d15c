import os

from dotenv import load_dotenv

# Centralized configuration for the frontdoor estimation toolkit

load_dotenv()

VERSION = "1.0.0"

# logging (utils.py)
LOG_DIR = os.getenv("FRONTDOOR_LOG_DIR", "logs")  # empty string disables file logging
LOG_LEVEL = os.getenv("FRONTDOOR_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# glm.py configurations
GLM_DEVIANCE_TOL = 1e-10  # absolute deviance change at IRLS convergence
GLM_SCORE_TOL = 1e-8  # max |weighted score| relative to total weight
GLM_MAX_ITER = 100
GLM_PROB_CLIP = 1e-12  # floor for logit offsets; pinned fits sit within 100x of it
GLM_RANK_TOL = 1e-10
SEPARATION_ETA = 20.0  # |linear predictor| beyond which a fitted probability counts as pinned
SEPARATION_POLICY = os.getenv("FRONTDOOR_SEPARATION", "raise")  # "raise" or "warn"
FLUCTUATION_TOL = 1e-12  # deviance tolerance for one-dimensional fluctuations
MULTINOMIAL_TOL = 1e-10  # Newton parameter-change tolerance

# estimators.py configurations
POSITIVITY_THRESHOLD = 1e-6
MEDIATOR_MAX_LEVELS = 10  # integer-valued mediators with at most this many values count as discrete
ITMLE_TOL = 1e-6
ITMLE_MAX_ITER = 50
CONFIDENCE_LEVEL = 0.95

# eif.py configurations
DERIVATIVE_STEPS = (1e-2, 1e-3, 1e-4)
LAW_SUM_TOL = 1e-12

# oracle.py configurations
MC_CHUNK = 1_000_000
ORACLE_GAP_TOL = 1e-12
RARE_OUTCOME_TRUTH = 0.0144  # Monte Carlo truth with 10^7 draws

# inference.py configurations
BOOTSTRAP_MAX_FAILURE = 0.10

# simulation.py / cli.py configurations
DEFAULT_SEED = int(os.getenv("FRONTDOOR_SEED", "20240521"))
DEFAULT_WORKERS = int(os.getenv("FRONTDOOR_WORKERS", "1"))
OUTPUT_DIR = os.getenv("FRONTDOOR_OUTPUT_DIR", "results")

EXIT_OK = 0
EXIT_GAP = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4
