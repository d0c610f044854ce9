import math

import numpy as np
import pytest

from qpmanifold import dynamics as dyn
from qpmanifold import finder as fi
from qpmanifold.errors import ConfigurationError, ConvergenceError, SamplingError
from qpmanifold.sphere_case import SphereParams, make_spec

POLE = np.array([0.0, 0.0, 1.0])
QUICK = fi.SearchBudget(seeds=40, max_iter=20)


@pytest.fixture(scope="module")
def periodic():
    """One forcing frequency: the bounded solution is a periodic orbit."""
    spec = make_spec(SphereParams(omega=(1.0,)))
    opts = fi.WindowOptions(search_each_level=False, search_horizon=40)
    tr = fi.bounded_solution(spec, (0.0, 200.0), burn=30, tol=1e-8, opts=opts, budget=QUICK,
                             z_plus=0.097)
    return spec, tr


def test_choose_eps(demo_spec):
    eps, fb = fi.choose_eps(demo_spec, np.array([POLE, [0.3, 0, 0.954]]), 0.1)
    assert 0 < eps <= 1
    assert eps * np.max(np.linalg.norm(fb, axis=1)) <= 0.05 + 1e-15


def test_pole_equilibrium_never_escapes():
    spec = make_spec(SphereParams(E_amp=0.0))
    assert fi.escape_time(spec, 0.0, POLE, 1e-6, 100.0) == math.inf


def test_boundary_start_escapes_immediately(demo_spec):
    x = np.array([0.8, 0.0, 0.6])
    assert fi.escape_time(demo_spec, 3.0, x, 0.5, 10.0) == 3.0


def test_reversed_coulomb_search_fails_egress():
    spec = make_spec(SphereParams(coulomb_sign=-1))
    rep = fi.waszewski_search(spec, 0.0, 20.0, QUICK, z_plus=0.1)
    assert rep.status == "egress_failed" and not rep.ok
    assert not rep.egress["holds"]


def test_search_censors_on_demo(demo_spec):
    rep = fi.waszewski_search(demo_spec, -50.0, 40.0, QUICK, z_plus=0.097)
    assert rep.ok and rep.escape_time == math.inf
    assert rep.trace[-1]["horizon"] == 40.0


def test_static_case_converges_to_pole():
    spec = make_spec(SphereParams(E_amp=0.0))
    tr = fi.bounded_solution(spec, (0.0, 10.0), burn=10, opts=fi.WindowOptions(search_horizon=20),
                             budget=QUICK, z_plus=0.0)
    assert np.max(np.abs(tr.x - POLE)) <= 1e-9
    assert np.max(tr.monitors["speed"]) <= 1e-9


def test_window_configuration_checked(demo_spec):
    with pytest.raises(ConfigurationError):
        fi.bounded_solution(demo_spec, (0.0, 10.5), opts=fi.WindowOptions())


def test_search_failure_raises_in_solver():
    spec = make_spec(SphereParams(coulomb_sign=-1))
    with pytest.raises(ConvergenceError):
        fi.bounded_solution(spec, (0.0, 10.0), burn=10, budget=QUICK, z_plus=0.1)


def test_periodic_orbit(periodic):
    spec, tr = periodic
    assert tr.step_meta["inside"]
    assert tr.step_meta["levels"][-1]["discrepancy"] < 1e-8
    # Poincare section: the state returns after one forcing period
    x0, v0 = tr.interp(50.0)
    x1, v1 = tr.interp(50.0 + 2 * math.pi)
    assert np.linalg.norm(x1 - x0) <= 1e-7 and np.linalg.norm(v1 - v0) <= 1e-7
    # the window solves the equation of motion: replay from the first sample
    rep = dyn.integrate_main(spec, dyn.make_state(spec, tr.x[0], tr.v[0], tr.t[0]), 20.0)
    assert np.linalg.norm(rep.x[-1] - tr.interp(20.0)[0]) <= 1e-7


def test_periodic_hull(periodic):
    spec, tr = periodic
    hull = fi.hull_extract(tr, spec.omega, grid_res=64)
    assert hull.residual <= 1e-4 and hull.holdout_residual <= 1e-4
    assert hull.fill == 1.0
    assert np.allclose(np.linalg.norm(hull.values, axis=1), 1.0, atol=1e-12)
    # multilinear interpolation: four times the resolution buys more than ten times the accuracy
    fine = fi.hull_extract(tr, spec.omega, grid_res=256)
    assert fine.residual <= hull.residual / 10
    assert np.linalg.norm(fine(tr.phi[123]) - tr.x[123]) <= fine.residual


def test_hull_csv(tmp_path, periodic):
    spec, tr = periodic
    hull = fi.hull_extract(tr, spec.omega, grid_res=16)
    hull.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "phi1,x1,x2,x3" and len(lines) == 17


def test_hull_limits(periodic):
    spec, tr = periodic
    with pytest.raises(ConfigurationError):
        fi.hull_extract(tr, (1.0, 2.0, 3.0, 5.0))
    with pytest.raises(SamplingError):
        fi.hull_extract(tr.window(0.0, 1.0), spec.omega, grid_res=64)


def test_uniqueness_probe_same_orbit(periodic):
    spec, tr = periodic
    rec = fi.uniqueness_probe(spec, tr, tr, samples=3)
    assert rec.orbit_distance <= 1e-14 and not rec.flags
    assert np.allclose(rec.xi_norms, 0.0)


def test_uniqueness_probe_flags_distinct(periodic):
    spec, tr = periodic
    shifted = dyn.build_trajectory(spec, tr.t, tr.x[::-1].copy(), -tr.v[::-1].copy(), tr.phi)
    rec = fi.uniqueness_probe(spec, tr, shifted, samples=3)
    assert rec.orbit_distance > 1e-6
    assert "distinct bounded solutions" in rec.flags
    assert len(rec.S) + len(rec.failures) == 3
