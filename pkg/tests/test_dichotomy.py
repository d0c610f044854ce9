import math

import numpy as np
import pytest
from scipy.linalg import expm

from qpmanifold import dichotomy as di
from qpmanifold import dynamics as dyn
from qpmanifold import hypotheses as hy
from qpmanifold.sphere_case import SphereParams, make_spec
from .test_dynamics import geodesic

POLE = np.array([0.0, 0.0, 1.0])
FAST = hy.GridOptions(torus_points=12, domain_samples=400, boundary_samples=64, refine_iters=200)


def rest_at_pole(params, t_end=200.0):
    spec = make_spec(params)
    tr = dyn.integrate_main(spec, dyn.make_state(spec, POLE, np.zeros(3)), t_end,
                            dyn.IntegrationOptions(dt_out=0.05))
    return spec, tr


def finite_time_exponents(S, T, dt=1.0):
    """QR exponents of exp(S T) from the identity, chunked so the small directions survive."""
    step = expm(S * dt)
    Q = np.eye(S.shape[0])
    logs = np.zeros(S.shape[0])
    for _ in range(int(round(T / dt))):
        Q, R = np.linalg.qr(step @ Q)
        logs += np.log(np.abs(np.diag(R)))
    return np.sort(logs / T)


def static_system(lam, kappa):
    eye = np.eye(2)
    return np.block([[np.zeros((2, 2)), eye], [lam * eye, -kappa * eye]])


@pytest.fixture(scope="module")
def static_pole():
    return rest_at_pole(SphereParams(E_amp=0.0))


def test_static_form_margin(static_pole):
    # at rest with <grad U, tau> = 0 the form is diag(lambda_f I, I) with lambda_f = a/(1+a)^3
    spec, tr = static_pole
    margin, _ = di.q_form_margin(spec, tr)
    assert margin == pytest.approx(0.125, abs=1e-12)


def test_static_exponents(static_pole):
    spec, tr = static_pole
    fr = dyn.variational_frame(spec, tr)
    ly = di.lyapunov_exponents(fr)
    T = ly.times[-1] - tr.t[0]
    want = finite_time_exponents(static_system(0.125, 0.0), T)
    assert np.allclose(np.sort(ly.exponents), want, atol=1e-6)
    # the finite-time bias decays like 1/T towards +-sqrt(lambda_f)
    assert np.allclose(np.abs(ly.exponents), math.sqrt(0.125), atol=2 * math.log(2) / T)
    assert ly.liouville_residual <= 1e-9


def test_static_certificate(static_pole):
    spec, tr = static_pole
    rep = di.certify(spec, tr, Z=0.0, opts=FAST)
    assert rep.verdict
    assert rep.counts == {"positive": 2, "negative": 2}
    assert rep.gap[0] < -0.01 < 0.01 < rep.gap[1]
    assert rep.alpha1_estimate == pytest.approx(0.125, abs=1e-12)


def test_damping_shifts_exponents():
    spec, tr = rest_at_pole(SphereParams(E_amp=0.0, kappa=0.02), t_end=100.0)
    ly = di.lyapunov_exponents(dyn.variational_frame(spec, tr))
    T = ly.times[-1] - tr.t[0]
    want = finite_time_exponents(static_system(0.125, 0.02), T)
    assert np.allclose(np.sort(ly.exponents), want, atol=1e-6)
    # the trace of the system is -2 kappa
    assert sum(ly.exponents) == pytest.approx(-0.04, abs=1e-6)


def test_reversed_field_has_negative_margin():
    spec, tr = rest_at_pole(SphereParams(E_amp=0.0, coulomb_sign=-1), t_end=20.0)
    margin, _ = di.q_form_margin(spec, tr)
    assert margin < 0
    rep = di.certify(spec, tr, Z=0.0, opts=FAST)
    assert not rep.verdict


def test_geodesic_is_not_hyperbolic():
    spec, tr = geodesic(0.7, t_end=200.0)
    rep = di.certify(spec, tr, opts=FAST)
    assert not rep.verdict
    # Jacobi fields on the round sphere stay bounded, so every exponent sits inside the band
    assert max(abs(e) for e in rep.exponents) < rep.gap_tol


def test_renormalization_spacing_checked(static_pole):
    spec, tr = static_pole
    fr = dyn.variational_frame(spec, tr)
    with pytest.raises(ValueError):
        di.lyapunov_exponents(fr, renorm_dt=0.075)


def test_q_dot_matrix_symmetric(static_pole):
    spec, tr = static_pole
    Q = di.q_dot_matrices(dyn.variational_frame(spec, tr))
    assert Q.shape[1:] == (4, 4)
    assert np.max(np.abs(Q - np.swapaxes(Q, 1, 2))) <= 1e-15
