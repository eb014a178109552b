import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "tselab",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("tselab")

ACCEPTANCE_LINES: list[str] = []
# wall-clock seconds of each session-scoped run, keyed by fixture name
TIMINGS: dict[str, float] = {}


def _timed(name, fn):
    t0 = time.perf_counter()
    out = fn()
    TIMINGS[name] = time.perf_counter() - t0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---- full-scale runs shared by the acceptance gate and the experiment tests ----


@pytest.fixture(scope="session")
def escalation_table():
    from tselab.experiments import default_spec, run_escalation

    return _timed("escalation_table", lambda: run_escalation(default_spec("escalation")))


@pytest.fixture(scope="session")
def fixed_input_table():
    from tselab.experiments import default_spec, run_fixed_input

    return _timed("fixed_input_table", lambda: run_fixed_input(default_spec("fixed_input")))


@pytest.fixture(scope="session")
def prenorm_table():
    from tselab.experiments import default_spec, run_prenorm

    return _timed("prenorm_table", lambda: run_prenorm(default_spec("prenorm", trials=20)))


@pytest.fixture(scope="session")
def deescalate_table():
    from tselab.experiments import default_spec, run_deescalate

    return _timed("deescalate_table", lambda: run_deescalate(default_spec("deescalate")))


@pytest.fixture(scope="session")
def eta_table():
    from tselab.experiments import default_spec, run_eta_concentration

    return _timed("eta_table", lambda: run_eta_concentration(default_spec("eta_concentration")))


@pytest.fixture(scope="session")
def oracle_table():
    from tselab.experiments import default_spec, run_oracle_expected_xi

    return _timed("oracle_table", lambda: run_oracle_expected_xi(default_spec("oracle_expected_xi")))


@pytest.fixture(scope="session")
def gate_instances():
    from tselab.experiments import run_theorem_gate

    return _timed("gate_instances", lambda: run_theorem_gate())
