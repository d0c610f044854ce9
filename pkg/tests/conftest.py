import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qpmanifold.sphere_case import SphereParams, make_spec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def demo_params():
    return SphereParams()


@pytest.fixture(scope="session")
def demo_spec(demo_params):
    return make_spec(demo_params)


@pytest.fixture(scope="session")
def perturbed_params():
    return SphereParams(B_amp=0.05, kappa=0.01)


@pytest.fixture(scope="session")
def perturbed_spec(perturbed_params):
    return make_spec(perturbed_params)


def cap_points(n, rho=0.6, seed=0):
    """Points on the unit sphere with height in (rho, 1]."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(rho + 1e-3, 1.0, n)
    th = rng.uniform(0, 2 * np.pi, n)
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=-1)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
