import sys

import numpy as np
import pytest

from distiv import benchmark, simlab
from distiv.model import FitConfig, NoiseConfig, fit_div


@pytest.fixture(scope="session")
def linear_fit():
    """Desk-scale fit on the linear continuous-instrument scenario (shared with the acceptance suite)."""
    return benchmark._scenario_fit("C3")


@pytest.fixture(scope="session")
def under_identified_fit():
    return benchmark._scenario_fit("C6", outcome_head="linear_no_bias")


@pytest.fixture(scope="session")
def binary_fit():
    return benchmark._scenario_fit("C8", binary_treatment=True)


@pytest.fixture(scope="session")
def small_fit():
    """A quick fit for plumbing tests: ~1 s."""
    data = simlab.generate_scenario("cont_linear_contZ", 200, 0)
    model, trace = fit_div(data, FitConfig(epochs=40, hidden_width=16, noise=NoiseConfig.uniform(4), diagnostics_every=10, seed=1))
    return data, model, trace


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in module.LINES:
            terminalreporter.write_line(line)
