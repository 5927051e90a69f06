import numpy as np
import pytest

from apnlab.harness.config import preset
from apnlab.harness.data import make_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    return make_synthetic(48, 2, nuisance=1.0, seed=3)


@pytest.fixture
def tiny_cfg():
    """YADIM preset shrunk so a training epoch takes well under a second."""
    cfg = preset("yadim")
    cfg.encoder.stage_channels = [4, 8, 8]
    cfg.epochs = 2
    cfg.batch_size = 16
    cfg.wall_time = False
    cfg.probe.hidden = 16
    cfg.probe.epochs = 3
    return cfg


# Acceptance lines are collected here and printed after the run, so they show
# up even when pytest captures stdout.
_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
