"""Riemannian geometry of embedded hypersurfaces {phi(x) = 0} in R^N.

Points and tangent vectors are plain ndarrays in ambient coordinates with the
ambient index last, so every routine broadcasts over leading batch axes.
The unit sphere is special-cased with closed forms; general level sets use
the Gauss formula with the shape operator  S = P (Hess phi / |grad phi|) P.
Sign convention: the curvature tensor satisfies <R(X,Y)Y,X> = K(X,Y), so the
unit sphere has K = +1.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, RangeError, SingularGeometryError
from .integrate import dopri5

FD_STEP = np.cbrt(np.finfo(float).eps)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


@dataclass(frozen=True)
class ScalarField:
    """Scalar field on the ambient space with optional analytic derivatives.

    Missing derivatives fall back to central differences with step cbrt(eps)*scale.
    """
    value: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return self.grad(x)
        return _central_diff(self.value, x)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        if self.hess is not None:
            return self.hess(x)
        return _central_diff(self.gradient, x)


def _central_diff(fn, x):
    """d fn / dx stacked on a new last axis: (..., *out, N)."""
    scale = np.maximum(1.0, np.abs(x))
    base_ndim = x.ndim - 1
    cols = []
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape)
        e[..., i] = FD_STEP * scale[..., i]
        diff = fn(x + e) - fn(x - e)
        denom = (2 * e[..., i]).reshape(x.shape[:-1] + (1,) * (diff.ndim - base_ndim))
        cols.append(diff / denom)
    return np.stack(cols, axis=-1)


def constant_field(c=0.0):
    return ScalarField(
        value=lambda x: np.full(x.shape[:-1], float(c)),
        grad=lambda x: np.zeros(x.shape),
        hess=lambda x: np.zeros(x.shape + (x.shape[-1],)),
    )


@dataclass(frozen=True)
class Manifold:
    """Regular level set, the unit sphere, or a user-supplied callback surface.

    Callback manifolds provide normal_fn, retract_fn and curvature_bound_fn, and
    optionally shape_fn returning the ambient shape operator.
    """
    ambient_dim: int
    kind: str
    level: Optional[ScalarField] = None
    curvature_bound_fn: Optional[Callable] = None
    normal_fn: Optional[Callable] = None
    retract_fn: Optional[Callable] = None
    shape_fn: Optional[Callable] = None
    on_manifold_tol: float = 1e-9
    singular_tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("unit_sphere", "level_set", "callback"):
            raise ConfigurationError(f"unknown manifold kind {self.kind!r}")
        if self.kind == "level_set" and self.level is None:
            raise ConfigurationError("level_set manifold needs a level function")
        if self.kind == "callback" and (self.normal_fn is None or self.retract_fn is None):
            raise ConfigurationError("callback manifold needs normal_fn and retract_fn")

    @property
    def dim(self):
        return self.ambient_dim - 1

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "unit_sphere":
            return _dot(x, x) - 1.0
        if self.kind == "callback":
            return np.linalg.norm(self.retract_fn(x) - x, axis=-1)
        return self.level(x)

    def _level_grad(self, x):
        g = self.level.gradient(x)
        gn = np.linalg.norm(g, axis=-1)
        scale = np.maximum(1.0, np.linalg.norm(x, axis=-1))
        if np.any(gn < self.singular_tol * scale):
            raise SingularGeometryError("level-set gradient vanishes: singular geometry")
        return g, gn

    def normal(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "unit_sphere":
            r = np.linalg.norm(x, axis=-1, keepdims=True)
            if np.any(r < self.singular_tol):
                raise SingularGeometryError("sphere normal undefined at the origin")
            return x / r
        if self.kind == "callback":
            return self.normal_fn(x)
        g, gn = self._level_grad(x)
        return g / gn[..., None]

    def project(self, x, w):
        n = self.normal(x)
        w = np.asarray(w, dtype=float)
        return w - _dot(w, n)[..., None] * n

    def retract(self, x, iters=4):
        """Closest-point map for the sphere; a few Newton steps along grad phi otherwise."""
        x = np.asarray(x, dtype=float)
        if self.kind == "unit_sphere":
            return x / np.linalg.norm(x, axis=-1, keepdims=True)
        if self.kind == "callback":
            return self.retract_fn(x)
        for _ in range(iters):
            phi = self.level(x)
            if np.all(np.abs(phi) < 1e-3 * self.on_manifold_tol):
                break
            g, gn = self._level_grad(x)
            x = x - (phi / gn**2)[..., None] * g
        return x

    def shape(self, x):
        """Shape operator as an ambient (..., N, N) matrix acting on tangent vectors."""
        x = np.asarray(x, dtype=float)
        n = self.normal(x)
        proj = np.eye(self.ambient_dim) - n[..., :, None] * n[..., None, :]
        if self.kind == "unit_sphere":
            r = np.linalg.norm(x, axis=-1)[..., None, None]
            return proj / r
        if self.kind == "callback":
            if self.shape_fn is None:
                raise ConfigurationError("callback manifold has no shape operator")
            return self.shape_fn(x)
        _, gn = self._level_grad(x)
        h = self.level.hessian(x) / gn[..., None, None]
        return proj @ h @ proj

    def second_form(self, x, a, b):
        if self.kind == "unit_sphere":
            return _dot(a, b) / np.linalg.norm(x, axis=-1)
        return np.einsum("...i,...ij,...j->...", a, self.shape(x), b)

    def curvature_term(self, x, eta, tau):
        """R(eta, tau) tau from the Gauss equation."""
        if self.kind == "unit_sphere":
            return _dot(tau, tau)[..., None] * eta - _dot(eta, tau)[..., None] * tau
        s = self.shape(x)
        s_eta = np.einsum("...ij,...j->...i", s, eta)
        s_tau = np.einsum("...ij,...j->...i", s, tau)
        return _dot(tau, s_tau)[..., None] * s_eta - _dot(eta, s_tau)[..., None] * s_tau

    def constraint_acceleration(self, x, v):
        """Normal acceleration -II(v, v) n that keeps a curve on the surface."""
        return -self.second_form(x, v, v)[..., None] * self.normal(x)

    def tangent_basis(self, x):
        """Orthonormal tangent frame (..., N, m) from a Householder reflection of n."""
        n = self.normal(x)
        N = self.ambient_dim
        sgn = np.where(n[..., -1] >= 0, 1.0, -1.0)
        u = n.copy()
        u[..., -1] += sgn
        h = np.eye(N) - 2 * u[..., :, None] * u[..., None, :] / _dot(u, u)[..., None, None]
        return h[..., :, : N - 1]


def unit_sphere(ambient_dim=3):
    return Manifold(ambient_dim=ambient_dim, kind="unit_sphere")


def level_set(field, ambient_dim):
    return Manifold(ambient_dim=ambient_dim, kind="level_set", level=field)


def quadric(weights):
    """Level set sum_i w_i x_i^2 = 1 (ellipsoids and cylinders)."""
    w = np.asarray(weights, dtype=float)
    field = ScalarField(
        value=lambda x: np.einsum("...i,i->...", x**2, w) - 1.0,
        grad=lambda x: 2 * w * x,
        hess=lambda x: np.broadcast_to(2 * np.diag(w), x.shape + (x.shape[-1],)).copy(),
    )
    return level_set(field, w.size)


def hyperplane(normal, offset=0.0):
    a = np.asarray(normal, dtype=float)
    field = ScalarField(
        value=lambda x: np.einsum("...i,i->...", x, a) - offset,
        grad=lambda x: np.broadcast_to(a, x.shape).copy(),
        hess=lambda x: np.zeros(x.shape + (x.shape[-1],)),
    )
    return level_set(field, a.size)


def project_tangent(M, x, w):
    return M.project(x, w)


def grad_on_manifold(M, h, x):
    return M.project(x, h.gradient(x))


def hess_matrix(M, h, x):
    """Ambient matrix of the Hesse form, compressed to the tangent space (Gauss formula)."""
    x = np.asarray(x, dtype=float)
    n = M.normal(x)
    proj = np.eye(M.ambient_dim) - n[..., :, None] * n[..., None, :]
    dh_n = _dot(h.gradient(x), n)
    m = h.hessian(x) - dh_n[..., None, None] * M.shape(x)
    return proj @ m @ proj


def hess_form(M, h, x, xi, eta):
    return np.einsum("...i,...ij,...j->...", xi, hess_matrix(M, h, x), eta)


def curve_step(M, x, h, step):
    return M.retract(x + step * h)


def directional_fd(M, fn, x, h, step=FD_STEP):
    """Central difference of fn along the retraction curve through x with velocity h."""
    return (fn(curve_step(M, x, h, step)) - fn(curve_step(M, x, h, -step))) / (2 * step)


def covariant_derivative(M, v, x, h, jac=None):
    """nabla_h v = P_T (v'(x) h); uses jac(x) if supplied, else a curve difference."""
    if jac is not None:
        d = np.einsum("...ij,...j->...i", jac(x), h)
    else:
        d = directional_fd(M, v, x, h)
    return M.project(x, d)


def principal_curvatures(M, x):
    basis = M.tangent_basis(x)
    s = np.swapaxes(basis, -1, -2) @ M.shape(x) @ basis
    return np.linalg.eigvalsh(0.5 * (s + np.swapaxes(s, -1, -2)))


def curvature_bound(M, x, generic=False):
    """K(x) = max(0, sup of sectional curvatures); generic=True forces the Gauss path."""
    x = np.asarray(x, dtype=float)
    if M.kind == "callback":
        if M.curvature_bound_fn is None:
            raise ConfigurationError("callback manifold requires curvature_bound_fn")
        return M.curvature_bound_fn(x)
    if M.kind == "unit_sphere" and not generic:
        return np.ones(x.shape[:-1])
    k = principal_curvatures(M, x)
    m = k.shape[-1]
    if m < 2:
        return np.zeros(x.shape[:-1])
    # the sup of det II over 2-planes is attained at a pair of extreme eigenvalues
    best = np.maximum(k[..., -1] * k[..., -2], k[..., 0] * k[..., 1])
    return np.maximum(0.0, best)


def parallel_transport(M, traj, w0, t0, t1, rtol=1e-12, atol=1e-14):
    """Transport w0 (shape (N,) or (r, N)) from traj(t0) to traj(t1).

    Integrates w' = -II(w, x') n along the trajectory's dense output and
    re-projects to the tangent space after every step.
    """
    lo, hi = traj.t_span
    slack = 1e-12 * max(1.0, abs(lo), abs(hi))
    if not (lo - slack <= t0 <= hi + slack and lo - slack <= t1 <= hi + slack):
        raise RangeError(f"transport interval [{t0}, {t1}] outside trajectory span [{lo}, {hi}]")
    w = np.atleast_2d(np.asarray(w0, dtype=float))
    if t1 == t0:
        return w.reshape(np.shape(w0))
    sign = 1.0 if t1 > t0 else -1.0

    def rhs(s, y, rows):
        xs, vs = traj.interp(t0 + sign * s)
        return -sign * M.second_form(xs, y, vs)[:, None] * M.normal(xs)[None, :]

    def proj(s, y, rows):
        xs, _ = traj.interp(t0 + sign * s)
        return M.project(xs, y)

    sol = dopri5(rhs, 0.0, w, abs(t1 - t0), rtol=rtol, atol=atol, project=proj,
                 t_eval=[abs(t1 - t0)])
    return sol.y[-1].reshape(np.shape(w0))


def boundary_normal_and_curvature(M, G, x):
    """Outward unit normal of {G < 0} at a boundary point and its minimal principal curvature."""
    x = np.asarray(x, dtype=float)
    g = grad_on_manifold(M, G, x)
    gn = np.linalg.norm(g, axis=-1)
    if np.any(gn < M.singular_tol * np.maximum(1.0, np.linalg.norm(G.gradient(x), axis=-1))):
        raise SingularGeometryError("boundary is not transversal: tangential grad G vanishes")
    nu = g / gn[..., None]
    basis = M.tangent_basis(x)
    # tangent directions of the boundary: orthogonal complement of nu inside T_x M
    coeff = np.einsum("...im,...i->...m", basis, nu)
    proj = np.eye(M.dim) - coeff[..., :, None] * coeff[..., None, :]
    hg = np.swapaxes(basis, -1, -2) @ hess_matrix(M, G, x) @ basis
    form = proj @ hg @ proj / gn[..., None, None]
    evals, evecs = np.linalg.eigh(0.5 * (form + np.swapaxes(form, -1, -2)))
    # discard the eigenvalue belonging to nu (its eigenvector aligns with coeff)
    align = np.abs(np.einsum("...m,...mk->...k", coeff, evecs))
    masked = np.where(align > 0.5, np.inf, evals)
    return nu, np.min(masked, axis=-1)
