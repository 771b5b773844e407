import numpy as np
import pytest

from atdm import ctm, scenario


@pytest.fixture(scope="session")
def table2():
    return ctm.table2_stretch()


@pytest.fixture(scope="session")
def base_case():
    """Synthetic base-case config and its baseline, shared by the slow tests."""
    cfg = scenario.synthetic_base_case(0)
    return cfg, scenario.run_baseline(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
