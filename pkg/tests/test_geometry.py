import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from qpmanifold import geometry as geo
from qpmanifold.errors import ConfigurationError, RangeError, SingularGeometryError

K = np.array([0.0, 0.0, 1.0])
S2 = geo.unit_sphere()
ELLIPSOID = geo.quadric([1.0, 2.0, 3.0])

vec3 = arrays(float, 3, elements=st.floats(-1, 1))


def on_sphere(v):
    n = np.linalg.norm(v)
    return None if n < 1e-3 else v / n


def field_u():
    return geo.ScalarField(value=lambda x: -x[..., 2],
                           grad=lambda x: np.broadcast_to(-K, x.shape).copy())


def field_U():
    return geo.ScalarField(value=lambda x: -np.log(x[..., 2] ** 2))


class Circle:
    """Latitude circle at colatitude theta traversed with angular speed 1."""

    def __init__(self, theta, t_end=2 * np.pi):
        self.theta, self.t_span = theta, (0.0, t_end)

    def interp(self, t):
        s, c = np.sin(self.theta), np.cos(self.theta)
        x = np.array([s * np.cos(t), s * np.sin(t), c])
        v = np.array([-s * np.sin(t), s * np.cos(t), 0.0])
        return x, v


@given(vec3, vec3)
def test_projection_is_tangent_on_level_set(p, w):
    x = on_sphere(p)
    if x is None:
        return
    x = x / np.sqrt(x[0] ** 2 + 2 * x[1] ** 2 + 3 * x[2] ** 2)
    t = ELLIPSOID.project(x, w)
    grad = np.array([2, 4, 6]) * x
    assert abs(np.dot(t, grad)) <= 1e-12 * max(1, np.linalg.norm(w) * np.linalg.norm(grad))


@given(vec3)
def test_tangent_basis_orthonormal(p):
    x = on_sphere(p)
    if x is None:
        return
    B = S2.tangent_basis(x)
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-13)
    assert np.allclose(B.T @ x, 0, atol=1e-13)


@given(vec3)
def test_sphere_gradient_of_height(p):
    x = on_sphere(p)
    if x is None:
        return
    got = geo.grad_on_manifold(S2, field_u(), x)
    assert np.allclose(got, -K + x[2] * x, atol=1e-14)


def test_log_potential_gradient_and_hessian():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = on_sphere(rng.normal(size=3) + [0, 0, 2])
        u = -x[2]
        grad_u = -K + x[2] * x
        gU = geo.grad_on_manifold(S2, field_U(), x)
        assert np.allclose(gU, -2 * grad_u / u, atol=1e-8)
        e = S2.project(x, rng.normal(size=3))
        e /= np.linalg.norm(e)
        h = geo.hess_form(S2, field_U(), x, e, e)
        assert h == pytest.approx(2 * np.dot(K, e) ** 2 / u**2 + 2, rel=1e-6)


def test_hessian_of_height_is_minus_u_identity():
    x = on_sphere(np.array([0.3, -0.2, 0.9]))
    H = geo.hess_matrix(S2, field_u(), x)
    B = S2.tangent_basis(x)
    assert np.allclose(B.T @ H @ B, x[2] * np.eye(2), atol=1e-12)


def test_covariant_derivative_of_rotation_field():
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = on_sphere(rng.normal(size=3))
        h = S2.project(x, rng.normal(size=3))
        got = geo.covariant_derivative(S2, lambda y: np.cross(K, y), x, h)
        want = S2.project(x, np.cross(K, h))
        assert np.allclose(got, want, atol=1e-9)
        exact = geo.covariant_derivative(S2, None, x, h, jac=lambda y: np.array(
            [[0, -1, 0], [1, 0, 0], [0, 0, 0.0]]))
        assert np.allclose(exact, want, atol=1e-15)


def test_generic_curvature_of_sphere():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    round_sphere = geo.quadric([1.0, 1.0, 1.0])
    assert np.allclose(geo.curvature_bound(round_sphere, x), 1.0, atol=1e-10)
    assert np.allclose(geo.curvature_bound(S2, x, generic=True), 1.0, atol=1e-10)
    assert np.all(geo.curvature_bound(S2, x) == 1.0)


def test_ellipsoid_gauss_curvature_against_shape_operator():
    M = geo.quadric([0.25, 1.0, 1.0])
    x = np.array([2.0, 0.0, 0.0])
    k = geo.principal_curvatures(M, x)
    assert np.allclose(k, [2.0, 2.0], atol=1e-12)
    assert geo.curvature_bound(M, x) == pytest.approx(4.0, abs=1e-12)
    y = np.array([0.0, 1.0, 0.0])
    assert geo.curvature_bound(M, y) == pytest.approx(np.prod(geo.principal_curvatures(M, y)))


def test_curvature_term_matches_sphere_closed_form():
    rng = np.random.default_rng(4)
    round_sphere = geo.quadric([1.0, 1.0, 1.0])
    for _ in range(10):
        x = on_sphere(rng.normal(size=3))
        a, b = (S2.project(x, rng.normal(size=3)) for _ in range(2))
        assert np.allclose(round_sphere.curvature_term(x, a, b), S2.curvature_term(x, a, b),
                           atol=1e-12)


def test_curvature_term_fd_fallback():
    # no analytic Hessian: central differences of the gradient
    M = geo.level_set(geo.ScalarField(value=lambda x: np.sum(x**2, axis=-1) - 1), 3)
    x = on_sphere(np.array([0.2, 0.5, 0.7]))
    assert geo.curvature_bound(M, x) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("theta", [0.3, 0.9, np.pi / 2, 2.0])
def test_sphere_holonomy(theta):
    c = Circle(theta)
    x0, _ = c.interp(0.0)
    e_theta = np.array([np.cos(theta), 0.0, -np.sin(theta)])
    w = geo.parallel_transport(S2, c, e_theta, 0.0, 2 * np.pi)
    angle = np.arctan2(np.dot(np.cross(e_theta, w), x0), np.dot(e_theta, w))
    want = np.angle(np.exp(1j * 2 * np.pi * (1 - np.cos(theta))))
    assert abs(np.angle(np.exp(1j * (angle - want)))) <= 1e-6
    assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-10)


def test_transport_backward_inverts_forward():
    c = Circle(0.7)
    x0, v0 = c.interp(0.0)
    w0 = np.stack([v0 / np.linalg.norm(v0), np.cross(x0, v0) / np.linalg.norm(v0)])
    w1 = geo.parallel_transport(S2, c, w0, 0.0, 3.0)
    back = geo.parallel_transport(S2, c, w1, 3.0, 0.0)
    assert np.allclose(back, w0, atol=1e-10)


def test_transport_outside_span():
    with pytest.raises(RangeError):
        geo.parallel_transport(S2, Circle(0.5), np.array([1.0, 0, 0]), 0.0, 10.0)


def test_boundary_geometry_of_cap():
    rho = 0.6
    G = geo.ScalarField(value=lambda x: rho - x[..., 2],
                        grad=lambda x: np.broadcast_to(-K, x.shape).copy(),
                        hess=lambda x: np.zeros(x.shape + (3,)))
    th = np.linspace(0, 2 * np.pi, 7)
    r = np.sqrt(1 - rho**2)
    x = np.stack([r * np.cos(th), r * np.sin(th), np.full_like(th, rho)], axis=-1)
    nu, lam = geo.boundary_normal_and_curvature(S2, G, x)
    assert np.allclose(lam, rho / r, atol=1e-13)
    grad_U = geo.grad_on_manifold(S2, field_U(), x)
    assert np.allclose(np.einsum("ij,ij->i", grad_U, nu), 2 * r / rho, rtol=1e-6)


def test_singular_geometry_errors():
    with pytest.raises(SingularGeometryError):
        S2.normal(np.zeros(3))
    G = geo.ScalarField(value=lambda x: 0.9 - x[..., 2])
    with pytest.raises(SingularGeometryError):
        geo.boundary_normal_and_curvature(S2, G, np.array([0.0, 0.0, 1.0]))


def test_callback_manifold_needs_curvature_bound():
    M = geo.Manifold(ambient_dim=3, kind="callback", normal_fn=S2.normal, retract_fn=S2.retract)
    with pytest.raises(ConfigurationError):
        geo.curvature_bound(M, np.array([0, 0, 1.0]))
    with pytest.raises(ConfigurationError):
        geo.Manifold(ambient_dim=3, kind="torus")


def test_retract_onto_level_set():
    x = np.array([[0.5, 0.5, 0.5], [1.0, 0.1, -0.2]])
    y = ELLIPSOID.retract(x, iters=20)
    assert np.all(np.abs(ELLIPSOID.residual(y)) < 1e-12)
