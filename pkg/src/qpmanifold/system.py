"""Problem instance: quasiperiodic force, perturbation operator, auxiliary U, domain G."""
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, QuadratureError
from .geometry import Manifold, ScalarField, directional_fd

TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class ToleranceSet:
    on_manifold_tol: float = 1e-9
    tangency_tol: float = 1e-9
    grid_refine_tol: float = 1e-8
    root_tol: float = 1e-13
    integrator_rel_tol: float = 1e-10
    integrator_abs_tol: float = 1e-12
    boundary_tol: float = 1e-10
    transport_tol: float = 1e-9

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if not val > 0:
                raise ConfigurationError(f"tolerance {name} must be positive, got {val}")


def wrap(angles):
    """Reduce angles to [0, 2 pi)."""
    r = np.mod(np.asarray(angles, dtype=float), TWO_PI)
    return np.where(r >= TWO_PI, 0.0, r)


def advance(phi, omega, t):
    """Phase flow phi + t omega on the torus; t may be an array of times."""
    t = np.asarray(t, dtype=float)
    return wrap(np.asarray(phi, dtype=float) + t[..., None] * np.asarray(omega, dtype=float))


def torus_grid(n, k, offset=0.0):
    """Uniform n^k grid on the torus as an (n**k, k) array."""
    axis = (np.arange(n) + offset) * TWO_PI / n
    mesh = np.meshgrid(*([axis] * k), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def resonance_margin(omega, order=10):
    """Smallest |<n, omega>| over nonzero integer n with |n|_inf <= order (diagnostic only)."""
    omega = np.asarray(omega, dtype=float)
    k = omega.size
    if k == 1:
        return abs(float(omega[0]))
    order = min(order, {2: 10, 3: 10}.get(k, 4))
    best = np.inf
    for n in product(range(-order, order + 1), repeat=k):
        if any(n):
            best = min(best, abs(float(np.dot(n, omega))))
    return best


@dataclass(frozen=True)
class SystemSpec:
    """Second-order system  nabla_x' x' = f(t omega, x) + P(t omega, x) x'  on a manifold.

    The domain is D = {G < 0}. All callables broadcast over leading axes:
    phases (..., k), points (..., N). Optional analytic derivatives:
    force_jac(phi, x) -> ambient Jacobian of f; perturbation_cov(phi, x, eta, xi) ->
    (nabla_eta P) xi. Samplers, when given, replace the generic domain sampling.
    """
    manifold: Manifold
    force: Callable
    U: ScalarField
    G: ScalarField
    omega: tuple
    tol: ToleranceSet = field(default_factory=ToleranceSet)
    perturbation: Optional[Callable] = None
    force_jac: Optional[Callable] = None
    perturbation_cov: Optional[Callable] = None
    domain_sampler: Optional[Callable] = None
    boundary_sampler: Optional[Callable] = None
    ambient_box: float = 1.5
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.omega) < 1:
            raise ConfigurationError("omega needs at least one frequency")

    @property
    def k(self):
        return len(self.omega)

    @property
    def has_perturbation(self):
        return self.perturbation is not None

    def f(self, phi, x):
        return self.force(np.asarray(phi, dtype=float), np.asarray(x, dtype=float))

    def P(self, phi, x, xi):
        xi = np.asarray(xi, dtype=float)
        if self.perturbation is None:
            return np.zeros(np.broadcast_shapes(np.shape(x), xi.shape))
        return self.perturbation(np.asarray(phi, dtype=float), np.asarray(x, dtype=float), xi)

    def cov_f(self, phi, x, eta):
        """nabla_eta f(phi, x) for tangent eta."""
        M = self.manifold
        if self.force_jac is not None:
            d = np.einsum("...ij,...j->...i", self.force_jac(phi, x), eta)
        else:
            d = directional_fd(M, lambda y: self.f(phi, y), x, eta)
        return M.project(x, d)

    def cov_P(self, phi, x, eta, xi):
        """(nabla_eta P) xi; the tangent extension y -> proj_y xi has zero covariant derivative at x."""
        if self.perturbation is None:
            return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(xi)))
        if self.perturbation_cov is not None:
            return self.perturbation_cov(phi, x, eta, xi)
        M = self.manifold
        d = directional_fd(M, lambda y: self.P(phi, y, M.project(y, xi)), x, eta)
        return M.project(x, d)

    def P_matrix(self, phi, x, basis):
        """Matrix of P(phi, x) in a tangent basis (..., N, m)."""
        cols = [self.P(phi, x, basis[..., :, j]) for j in range(basis.shape[-1])]
        img = np.stack(cols, axis=-1)
        return np.swapaxes(basis, -1, -2) @ img

    def acceleration(self, phi, x, v):
        """Ambient second derivative of x along a solution."""
        return self.f(phi, x) + self.P(phi, x, v) + self.manifold.constraint_acceleration(x, v)


def averaged_field(spec, x, quad_points_per_dim=8, max_doublings=5):
    """Torus average of f(., x) by the periodic trapezoidal rule, doubled until stable."""
    if quad_points_per_dim < 4:
        raise ValueError("quad_points_per_dim must be >= 4")
    x = np.asarray(x, dtype=float)
    n = quad_points_per_dim
    prev = None
    for _ in range(max_doublings + 1):
        grid = torus_grid(n, spec.k)
        phi = grid.reshape((grid.shape[0],) + (1,) * (x.ndim - 1) + (spec.k,))
        cur = np.mean(spec.f(phi, x[None]), axis=0)
        if prev is not None and np.max(np.abs(cur - prev)) < spec.tol.grid_refine_tol:
            return spec.manifold.project(x, cur)
        prev, n = cur, 2 * n
    raise QuadratureError(
        f"torus average did not converge; last change {np.max(np.abs(cur - prev)):.3g}")


def tangency_defect(spec, phi, x, rng=None):
    """Largest normal component of f and of P applied to random tangent vectors."""
    M = spec.manifold
    n = M.normal(x)
    fd = np.max(np.abs(np.einsum("...i,...i->...", spec.f(phi, x), n)))
    rng = np.random.default_rng(0) if rng is None else rng
    xi = M.project(x, rng.normal(size=np.shape(x)))
    pd = np.max(np.abs(np.einsum("...i,...i->...", spec.P(phi, x, xi), n)))
    return float(max(fd, pd))
