import warnings

import pytest

from ctislu.config import small_config
from ctislu.trainer import build_data


def quiet_build(cfg, **kw):
    """build_data without the per-split missing-intent warnings of tiny corpora."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_data(cfg, **kw)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config(seed=0)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return quiet_build(small_cfg)


# ---------------------------------------------------------------- acceptance verdicts

VERDICTS = {}       # criterion number -> (outcome, detail)
DETAILS = {}        # criterion number -> measured values, filled in by the tests


def pytest_runtest_logreport(report):
    if report.when != "call" or "acceptance" not in report.keywords:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        n = int(name.split("_")[2])
        VERDICTS[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {n:2d}: {VERDICTS[n]}  {DETAILS.get(n, '')}".rstrip())
