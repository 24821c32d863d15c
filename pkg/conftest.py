import os

import pytest

# keep test runs from writing per-module log files; set before config is imported
os.environ.setdefault("FRONTDOOR_LOG_DIR", "")
os.environ["FRONTDOOR_SEPARATION"] = "raise"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long Monte Carlo reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="slow Monte Carlo reproduction, use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
