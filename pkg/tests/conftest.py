from __future__ import annotations

import numpy as np
import pytest

from adaptive_design.model import DoseInterval, ModelParams

# Lines appended by the acceptance module, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def theta_ref() -> ModelParams:
    return ModelParams(2.0, 0.467, 25.0)


@pytest.fixture
def interval() -> DoseInterval:
    return DoseInterval(0.0, 150.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
