import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qpmanifold import system as sysm
from qpmanifold.errors import ConfigurationError
from qpmanifold.sphere_case import SphereParams, make_spec
from .conftest import cap_points


def test_advance_example():
    phi = sysm.advance([0.0, 0.0], (1.0, math.sqrt(2)), 2 * math.pi)
    assert phi[0] == pytest.approx(0.0, abs=1e-12) or phi[0] == pytest.approx(2 * math.pi)
    assert phi[1] == pytest.approx((2 * math.pi * math.sqrt(2)) % (2 * math.pi), abs=1e-12)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_advance_is_a_flow(t1, t2):
    om = (1.0, math.sqrt(2))
    a = sysm.advance(sysm.advance([0.3, 1.1], om, t1), om, t2)
    b = sysm.advance([0.3, 1.1], om, t1 + t2)
    d = np.angle(np.exp(1j * (a - b)))
    assert np.all(np.abs(d) < 1e-9)
    assert np.all((a >= 0) & (a < 2 * math.pi))


def test_torus_grid_shape():
    g = sysm.torus_grid(4, 2)
    assert g.shape == (16, 2)
    assert g.max() < 2 * math.pi


def test_resonance_margin():
    assert sysm.resonance_margin((1.0, 2.0)) == 0.0
    assert 0 < sysm.resonance_margin((1.0, math.sqrt(2))) < 0.1


def test_tolerances_must_be_positive():
    with pytest.raises(ConfigurationError):
        sysm.ToleranceSet(root_tol=0.0)


def test_spec_needs_frequency(demo_spec):
    with pytest.raises(ConfigurationError):
        sysm.SystemSpec(manifold=demo_spec.manifold, force=demo_spec.force, U=demo_spec.U,
                        G=demo_spec.G, omega=())


@pytest.mark.parametrize("params", [SphereParams(), SphereParams(B_amp=0.3, kappa=0.1)])
def test_tangency(params):
    spec = make_spec(params)
    x = cap_points(200)
    phi = np.random.default_rng(0).uniform(0, 2 * np.pi, (200, 2))
    assert sysm.tangency_defect(spec, phi, x) <= spec.tol.tangency_tol


def test_averaged_field_drops_oscillating_part(demo_spec):
    x = cap_points(5)
    avg = sysm.averaged_field(demo_spec, x)
    static = make_spec(SphereParams(E_amp=0.0))
    want = static.manifold.project(x, static.f(np.zeros((5, 2)), x))
    assert np.allclose(avg, want, atol=1e-12)


def test_averaged_field_linearity(demo_spec):
    x = cap_points(4, seed=5)
    c = np.array([0.01, -0.02, 0.03])
    shifted = sysm.SystemSpec(manifold=demo_spec.manifold,
                              force=lambda p, y: demo_spec.force(p, y) + c,
                              U=demo_spec.U, G=demo_spec.G, omega=demo_spec.omega)
    lhs = sysm.averaged_field(shifted, x)
    rhs = sysm.averaged_field(demo_spec, x) + demo_spec.manifold.project(x, c)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_cov_derivatives_fd_vs_analytic():
    spec = make_spec(SphereParams(B_amp=0.2, kappa=0.1))
    fd = sysm.SystemSpec(manifold=spec.manifold, force=spec.force, U=spec.U, G=spec.G,
                         omega=spec.omega, perturbation=spec.perturbation)
    rng = np.random.default_rng(7)
    x = cap_points(6, seed=7)
    phi = rng.uniform(0, 2 * np.pi, (6, 2))
    eta = spec.manifold.project(x, rng.normal(size=(6, 3)))
    xi = spec.manifold.project(x, rng.normal(size=(6, 3)))
    assert np.allclose(spec.cov_f(phi, x, eta), fd.cov_f(phi, x, eta), atol=1e-7)
    assert np.allclose(spec.cov_P(phi, x, eta, xi), fd.cov_P(phi, x, eta, xi), atol=1e-7)


def test_acceleration_keeps_constraint(demo_spec):
    # d^2/dt^2 |x|^2 = 2(|v|^2 + <x, a>) = 0 on the sphere
    x = cap_points(10)
    v = demo_spec.manifold.project(x, np.random.default_rng(0).normal(size=(10, 3)))
    a = demo_spec.acceleration(np.zeros((10, 2)), x, v)
    assert np.allclose(np.sum(v * v, 1) + np.sum(x * a, 1), 0, atol=1e-13)
