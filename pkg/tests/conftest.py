import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from actorsim.kinetics.model import IPSCModel
from actorsim.kinetics.params import load_kinetic_config
from actorsim.testbeds import LinearGaussianModel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def kcfg():
    return load_kinetic_config()


@pytest.fixture(scope="session")
def ipsc(kcfg):
    return IPSCModel(kcfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear():
    return LinearGaussianModel(dim=3, noise_sd=0.1, gain=0.5)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            detail = dict(rep.user_properties).get("acceptance")
            name = rep.nodeid.split("::")[-1]
            lines.append((name, detail or ("PASS" if rep.passed else "FAIL - raised before a verdict")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, detail in sorted(lines):
            terminalreporter.write_line(f"{name}: {detail}")
