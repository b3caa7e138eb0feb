import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from icjm.likelihood import ModelParameters, ModelSpec, Variant  # noqa: E402
from icjm.simulate import PRESET_PARAMETERS, PRESET_SPEC, SimulationParams, simulate_dataset  # noqa: E402

_ACCEPTANCE = pytest.StashKey[dict]()


def record_acceptance(config, number: int, line: str) -> None:
    config.stash.setdefault(_ACCEPTANCE, {})[number] = line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


settings.register_profile("icjm", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("icjm")


@pytest.fixture(scope="session")
def preset_spec():
    return PRESET_SPEC


@pytest.fixture(scope="session")
def preset_params():
    return PRESET_PARAMETERS.copy()


@pytest.fixture(scope="session")
def small_cohort():
    """40 simulated patients with ground truth."""
    return simulate_dataset(SimulationParams(), 40, seed=5)


@pytest.fixture(scope="session")
def icjm2_spec():
    return ModelSpec(Variant.ICJM2, PRESET_SPEC.ncs_knots, PRESET_SPEC.h0_knots)


@pytest.fixture(scope="session")
def icjm2_params(icjm2_spec):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 7))
    return ModelParameters(
        beta=np.array([2.34, 0.28, 0.61, 0.95, 0.02, -2.09, -0.20, 0.04]),
        tau_eps=47.4,
        Omega=a @ a.T / 7 + 0.5 * np.eye(7),
        tau_u=1.0,
        gamma_h0=PRESET_PARAMETERS.gamma_h0.copy(),
        tau_h0=np.ones(2),
        gamma=np.array([0.5, 0.23]),
        alpha=np.array([[0.13, 3.01, 1.10], [0.42, 2.62, 0.2]]),
    )

