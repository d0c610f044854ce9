"""Grid-plus-refinement verification of the standing hypotheses and extremal constants.

Every "max over torus x closure(D)" is realized the same way: evaluate on a
uniform torus grid times a quasi-random sample of the domain (and of its
boundary for boundary conditions), then polish the five best cells with a
Nelder-Mead simplex in local (phase, tangent) coordinates.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.stats import qmc

from . import bounds
from .errors import SamplingError
from .geometry import (boundary_normal_and_curvature, curvature_bound, grad_on_manifold,
                       hess_matrix)
from .system import torus_grid, wrap

EQUALITY_TOL = 1e-9


@dataclass(frozen=True)
class GridOptions:
    torus_points: int = 24
    domain_samples: int = 2000
    boundary_samples: int = 256
    refine_cells: int = 5
    refine_iters: int = 400
    seed: int = 0
    lp_angles: int = 32


@dataclass
class HypothesisVerdict:
    name: str
    holds: bool
    margin: float
    witness: tuple
    grid_meta: dict = field(default_factory=dict)
    strict: bool = True
    raw_slack: float = math.nan

    def as_dict(self):
        phi, x = self.witness
        return {"name": self.name, "holds": self.holds, "margin": self.margin,
                "strict": self.strict, "raw_slack": self.raw_slack,
                "witness": {"phase": _listify(phi), "point": _listify(x)},
                "grid_meta": self.grid_meta}


@dataclass
class PointCoefficients:
    M_f: float
    Lambda_P: float
    lambda_U: float
    mu_U: float
    lambda_f: float
    M_P: float
    M_U: float
    M_PU: float
    L_P: float
    K: float


@dataclass
class Extremum:
    value: float
    phase: np.ndarray
    point: np.ndarray
    coarse_value: float
    meta: dict


def _listify(a):
    return None if a is None else [float(v) for v in np.ravel(a)]


def _bc(phi, x):
    phi = np.asarray(phi, dtype=float)
    x = np.asarray(x, dtype=float)
    lead = np.broadcast_shapes(phi.shape[:-1], x.shape[:-1])
    return (np.broadcast_to(phi, lead + phi.shape[-1:]),
            np.broadcast_to(x, lead + x.shape[-1:]))


def tangent_form_extremes(form, basis, sym_tol=1e-10):
    """(lambda_min, lambda_max) of an ambient bilinear form restricted to span(basis)."""
    m = np.swapaxes(basis, -1, -2) @ form @ basis
    asym = np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0.0)
    scale = max(1.0, float(np.max(np.abs(m), initial=0.0)))
    if asym > sym_tol * scale:
        raise ValueError(f"form not symmetric (defect {asym:.3g}); symmetrize first")
    ev = np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))
    return ev[..., 0], ev[..., -1]


# ---------------------------------------------------------------------------
# pointwise coefficient fields, vectorized over (phase, point)

class Fields:
    """Pointwise coefficient fields of a SystemSpec."""

    def __init__(self, spec, lp_angles=32):
        self.spec = spec
        self.M = spec.manifold
        self.lp_angles = lp_angles

    def basis(self, x):
        return self.M.tangent_basis(x)

    def hess_U_tan(self, x):
        B = self.basis(x)
        return B, np.swapaxes(B, -1, -2) @ hess_matrix(self.M, self.spec.U, x) @ B

    def lambda_U(self, x):
        _, h = self.hess_U_tan(x)
        return np.linalg.eigvalsh(0.5 * (h + np.swapaxes(h, -1, -2)))[..., 0]

    def grad_U(self, x):
        return grad_on_manifold(self.M, self.spec.U, x)

    def M_U(self, x):
        return np.linalg.norm(self.grad_U(x), axis=-1)

    def mu_U(self, x):
        B, h = self.hess_U_tan(x)
        g = np.einsum("...im,...i->...m", B, self.grad_U(x))
        m = h - 0.5 * g[..., :, None] * g[..., None, :]
        return np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))[..., 0]

    def K(self, x):
        return curvature_bound(self.M, x)

    def U(self, x):
        return self.spec.U(x)

    def f_norm(self, phi, x):
        return np.linalg.norm(self.spec.f(phi, x), axis=-1)

    def dU_f(self, phi, x):
        return np.einsum("...i,...i->...", self.grad_U(x), self.spec.f(phi, x))

    def grad_f_tan(self, phi, x):
        phi, x = _bc(phi, x)
        B = self.basis(x)
        cols = [self.spec.cov_f(phi, x, B[..., :, j]) for j in range(B.shape[-1])]
        return np.swapaxes(B, -1, -2) @ np.stack(cols, axis=-1)

    def lambda_f(self, phi, x):
        a = self.grad_f_tan(phi, x)
        return np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))[..., 0]

    def P_tan(self, phi, x):
        phi, x = _bc(phi, x)
        B = self.basis(x)
        return B, self.spec.P_matrix(phi, x, B)

    def Lambda_P_phi(self, phi, x):
        _, p = self.P_tan(phi, x)
        return np.linalg.eigvalsh(0.5 * (p + np.swapaxes(p, -1, -2)))[..., -1]

    def M_P(self, phi, x):
        _, p = self.P_tan(phi, x)
        return np.linalg.norm(p, ord=2, axis=(-2, -1))

    def M_PU(self, phi, x):
        B, p = self.P_tan(phi, x)
        g = np.einsum("...im,...i->...m", B, self.grad_U(x))
        return np.linalg.norm(np.einsum("...ji,...j->...i", p, g), axis=-1)

    def L_P(self, phi, x):
        """max |<(nabla_eta P) xi, eta>| over unit tangent xi, eta."""
        spec = self.spec
        phi, x = _bc(phi, x)
        if not spec.has_perturbation:
            return np.zeros(x.shape[:-1])
        B = self.basis(x)
        m = B.shape[-1]
        # T[..., j, a, b] = <(nabla_{e_a} P) e_j, e_b>
        T = np.empty(x.shape[:-1] + (m, m, m))
        for a in range(m):
            for j in range(m):
                d = spec.cov_P(phi, x, B[..., :, a], B[..., :, j])
                T[..., j, a, :] = np.einsum("...im,...i->...m", B, d)

        def value(eta):
            c = np.einsum("...a,...b,...jab->...j", eta, eta, T)
            return np.linalg.norm(c, axis=-1)

        if m == 1:
            return value(np.ones(x.shape[:-1] + (1,)))
        if m == 2:
            n = self.lp_angles
            ang = np.arange(n) * np.pi / n
            vals = np.stack([value(np.broadcast_to([math.cos(t), math.sin(t)], x.shape[:-1] + (2,)))
                             for t in ang], axis=-1)
            best = np.argmax(vals, axis=-1)
            lo = ang[best] - np.pi / n
            hi = ang[best] + np.pi / n
            gr = (math.sqrt(5) - 1) / 2

            def at(t):
                return value(np.stack([np.cos(t), np.sin(t)], axis=-1))
            for _ in range(40):
                c1, c2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
                f1, f2 = at(c1), at(c2)
                left = f1 > f2
                hi = np.where(left, c2, hi)
                lo = np.where(left, lo, c1)
            return np.maximum(np.max(vals, axis=-1), np.maximum(f1, f2))
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(4000, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = np.stack([value(np.broadcast_to(d, x.shape[:-1] + (m,))) for d in dirs], axis=-1)
        return np.max(vals, axis=-1)

    def sigma(self, phi, x, Z):
        return bounds.sigma_threshold(self.M_U(x), self.M_P(phi, x), self.M_PU(phi, x),
                                      self.L_P(phi, x), Z)

    def monotone(self, phi, x):
        return self.lambda_f(phi, x) + 0.5 * self.dU_f(phi, x)

    # boundary quantities
    def boundary_geometry(self, x):
        return boundary_normal_and_curvature(self.M, self.spec.G, x)

    def nu_f(self, phi, x):
        nu, _ = self.boundary_geometry(x)
        phi, _ = _bc(phi, x)
        return np.einsum("...i,...i->...", nu, self.spec.f(phi, x))

    def P_adj_nu_sq(self, phi, x):
        nu, _ = self.boundary_geometry(x)
        phi, x = _bc(phi, x)
        B, p = self.P_tan(phi, x)
        g = np.einsum("...im,...i->...m", B, np.broadcast_to(nu, x.shape))
        return np.sum(np.einsum("...ji,...j->...i", p, g) ** 2, axis=-1)


# ---------------------------------------------------------------------------
# sampling of the domain and its boundary

def _halton(n, d, seed):
    return qmc.Halton(d=d, scramble=True, seed=seed).random(n)


def project_to_boundary(spec, x, iters=30):
    M, G = spec.manifold, spec.G
    for _ in range(iters):
        g = grad_on_manifold(M, G, x)
        val = G(x)
        if np.all(np.abs(val) < spec.tol.boundary_tol):
            break
        x = M.retract(x - (val / np.sum(g * g, axis=-1))[..., None] * g)
    return x


def sample_domain(spec, n, seed=0):
    """Quasi-uniform points of closure(D) on the manifold (rejection from an ambient box)."""
    if spec.domain_sampler is not None:
        pts = spec.domain_sampler(n, seed)
    else:
        M = spec.manifold
        pts = []
        got = 0
        for attempt in range(50):
            u = _halton(4 * n, M.ambient_dim, seed + attempt)
            cand = M.retract((2 * u - 1) * spec.ambient_box)
            ok = np.isfinite(cand).all(axis=1) & (spec.G(cand) <= 0)
            ok &= np.abs(M.residual(cand)) <= spec.tol.on_manifold_tol * 10
            pts.append(cand[ok])
            got += int(ok.sum())
            if got >= n:
                break
        pts = np.concatenate(pts)[:n]
    if len(pts) == 0:
        raise SamplingError("domain sampling found no points with G <= 0")
    return np.asarray(pts)


def sample_boundary(spec, n, seed=0):
    """Points of {G = 0}: direct parametrization if supplied, else ray search from an interior point."""
    if spec.boundary_sampler is not None:
        return np.asarray(spec.boundary_sampler(n))
    M, G = spec.manifold, spec.G
    inner = sample_domain(spec, 200, seed)
    c = inner[np.argmin(G(inner))]
    dirs = M.project(c, 2 * _halton(n, M.ambient_dim, seed + 7) - 1)
    out = []
    for d in dirs:
        nd = np.linalg.norm(d)
        if nd < 1e-12:
            continue
        d = d / nd

        def g(t):
            return float(G(M.retract(c + t * d)))
        t_hi = 0.1
        while g(t_hi) < 0 and t_hi < 1e3:
            t_hi *= 2
        if g(t_hi) < 0:
            continue
        t = brentq(g, 0.0, t_hi, xtol=1e-14)
        out.append(M.retract(c + t * d))
    if not out:
        raise SamplingError("boundary sampling failed: no ray crosses G = 0")
    return project_to_boundary(spec, np.array(out))


_SAMPLE_CACHE = {}


def _boundary_or_empty(spec, n, seed):
    # a domain without boundary (G < 0 everywhere) is legitimate for domain extrema
    try:
        return sample_boundary(spec, n, seed)
    except SamplingError:
        return np.empty((0, spec.manifold.ambient_dim))


def samples_for(spec, opts):
    """Domain and boundary samples, cached per spec object (specs are immutable)."""
    key = (id(spec), opts.domain_samples, opts.boundary_samples, opts.seed)
    hit = _SAMPLE_CACHE.get(key)
    if hit is not None and hit[0] is spec:
        return hit[1], hit[2]
    dom = sample_domain(spec, opts.domain_samples, opts.seed)
    bnd = _boundary_or_empty(spec, opts.boundary_samples, opts.seed)
    if len(_SAMPLE_CACHE) >= 32:
        _SAMPLE_CACHE.pop(next(iter(_SAMPLE_CACHE)))
    _SAMPLE_CACHE[key] = (spec, dom, bnd)
    return dom, bnd


def _clamp_to_domain(spec, x0, x):
    """Move x back to the boundary along the chart segment if it left closure(D)."""
    G = spec.G
    if float(G(x)) <= 0:
        return x
    M = spec.manifold

    def g(lam):
        return float(G(M.retract(x0 + lam * (x - x0))))
    if g(0.0) > 0:
        return project_to_boundary(spec, x0)
    lam = brentq(g, 0.0, 1.0, xtol=1e-15)
    return project_to_boundary(spec, M.retract(x0 + lam * (x - x0)))


# ---------------------------------------------------------------------------

def domain_extremize(g, spec, mode="max", opts=None, phase=True, region="domain"):
    """Global extremum of g over (torus x) closure(D) or its boundary.

    g takes (phi, x) when phase is True, else x alone; both vectorized.
    """
    opts = opts or GridOptions()
    sgn = 1.0 if mode == "max" else -1.0
    dom, bnd = samples_for(spec, opts)
    # "domain" means closure(D), so boundary samples are admissible candidates
    if region == "boundary" and len(bnd) == 0:
        raise SamplingError("boundary sampling failed: no ray crosses G = 0")
    X = bnd if region == "boundary" else np.concatenate([dom, bnd])
    k = spec.k
    rng = np.random.default_rng(opts.seed)
    if phase:
        phis = torus_grid(opts.torus_points, k, offset=rng.uniform(0, 1))
        vals = np.empty((phis.shape[0], X.shape[0]))
        chunk = max(1, 200_000 // max(1, X.shape[0]))
        for i in range(0, phis.shape[0], chunk):
            ph = phis[i:i + chunk][:, None, :]
            vals[i:i + chunk] = g(ph, X[None, :, :])
    else:
        phis = np.zeros((1, k))
        vals = np.asarray(g(X))[None, :]
    flat = sgn * vals.ravel()
    if not np.any(np.isfinite(flat)):
        raise SamplingError("extremized function is not finite on the sample set")
    flat = np.where(np.isfinite(flat), flat, -np.inf)
    order = np.argsort(-flat, kind="stable")
    coarse = float(flat[order[0]])
    best_val, best_phi, best_x = coarse, phis[order[0] // X.shape[0]], X[order[0] % X.shape[0]]

    M = spec.manifold
    seen = []
    n_refined = 0
    for idx in order:
        if n_refined >= opts.refine_cells:
            break
        ip, ix = divmod(int(idx), X.shape[0])
        key = (ip, ix)
        if key in seen:
            continue
        seen.append(key)
        n_refined += 1
        phi0, x0 = phis[ip], X[ix]
        B0 = M.tangent_basis(x0)
        on_bnd = region == "boundary"

        def decode(z):
            xx = M.retract(x0 + B0 @ z[k:] if phase else x0 + B0 @ z)
            if on_bnd:
                xx = project_to_boundary(spec, xx)
            else:
                xx = _clamp_to_domain(spec, x0, xx)
            pp = wrap(phi0 + z[:k]) if phase else phi0
            return pp, xx

        def obj(z):
            pp, xx = decode(z)
            v = g(pp[None], xx[None])[0] if phase else np.asarray(g(xx[None]))[0]
            return -sgn * float(v) if np.isfinite(v) else np.inf

        dim = (k if phase else 0) + M.dim
        step = np.concatenate([np.full(k if phase else 0, np.pi / opts.torus_points),
                               np.full(M.dim, 0.05)])
        simplex = np.vstack([np.zeros(dim), np.diag(step)])
        res = minimize(obj, np.zeros(dim), method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxiter": opts.refine_iters,
                                "xatol": 1e-11, "fatol": 1e-14})
        if -res.fun > best_val:
            best_val = -res.fun
            best_phi, best_x = decode(res.x)
    return Extremum(value=sgn * best_val, phase=best_phi if phase else None, point=best_x,
                    coarse_value=sgn * coarse,
                    meta={"torus_points": opts.torus_points if phase else 0,
                          "samples": int(X.shape[0]), "refined_cells": n_refined})


def point_coefficients(spec, phi, x, torus_points=24, lp_angles=32):
    """All pointwise coefficients at (phi, x); M_f and Lambda_P are torus maxima at x."""
    F = Fields(spec, lp_angles)
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    grid = torus_grid(torus_points, spec.k)

    def torus_max(fn):
        vals = fn(grid, x[None])
        i = int(np.argmax(vals))
        res = minimize(lambda t: -float(fn(wrap(grid[i] + t)[None], x[None])[0]),
                       np.zeros(spec.k), method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 400,
                                "initial_simplex": np.vstack([np.zeros(spec.k),
                                                              np.eye(spec.k) * np.pi / torus_points])})
        return max(float(vals[i]), -res.fun)

    return PointCoefficients(
        M_f=torus_max(F.f_norm),
        Lambda_P=torus_max(F.Lambda_P_phi),
        lambda_U=float(F.lambda_U(x)),
        mu_U=float(F.mu_U(x)),
        lambda_f=float(F.lambda_f(phi, x)),
        M_P=float(F.M_P(phi, x)),
        M_U=float(F.M_U(x)),
        M_PU=float(F.M_PU(phi, x)),
        L_P=float(F.L_P(phi, x)),
        K=float(F.K(x)),
    )


def _verdict(name, ext, strict=True, region="domain"):
    raw = float(ext.value)
    margin = raw if strict else raw + EQUALITY_TOL
    meta = dict(ext.meta)
    meta.update({"coarse": ext.coarse_value, "region": region})
    return HypothesisVerdict(name=name, holds=bool(margin > 0), margin=margin,
                             witness=(ext.phase, ext.point), grid_meta=meta, strict=strict,
                             raw_slack=raw)


@dataclass
class CheckResult:
    verdicts: list
    constants: bounds.ConstantsReport
    extras: dict

    def verdict(self, name):
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def all_hold(self):
        return all(v.holds for v in self.verdicts)


def compute_constants(spec, opts=None, q_mode="default"):
    """ConstantsReport from generic optimizers, plus auxiliary extremes."""
    opts = opts or GridOptions()
    F = Fields(spec, opts.lp_angles)
    ex = {}
    lam_min = domain_extremize(F.lambda_U, spec, "min", opts, phase=False)
    ex["lambda_U_min"] = lam_min

    def lam_safe(x):
        lam = F.lambda_U(x)
        return np.where(lam > 0, lam, np.nan)
    ex["C_f"] = domain_extremize(lambda p, x: F.f_norm(p, x) / lam_safe(x), spec, "max", opts)
    ex["C_U"] = domain_extremize(F.M_U, spec, "max", opts, phase=False)
    ex["q2"] = domain_extremize(lambda p, x: -F.dU_f(p, x) / lam_safe(x), spec, "max", opts)
    if spec.has_perturbation:
        ex["p"] = domain_extremize(lambda p, x: F.M_PU(p, x) / lam_safe(x), spec, "max", opts)
        l_val, l_wit = _ratio_l(spec, F, opts)
    else:
        ex["p"] = None
        l_val, l_wit = 0.0, None
    ex["U_min"] = domain_extremize(F.U, spec, "min", opts, phase=False)
    ex["U_max"] = domain_extremize(F.U, spec, "max", opts, phase=False)
    p_val = max(0.0, ex["p"].value) if ex["p"] is not None else 0.0
    wit = {n: (_listify(e.phase), _listify(e.point)) for n, e in ex.items() if e is not None}
    if l_wit is not None:
        wit["l"] = (None, _listify(l_wit))
    meta = {"torus_points": opts.torus_points, "domain_samples": opts.domain_samples,
            "boundary_samples": opts.boundary_samples, "refine_cells": opts.refine_cells,
            "refine_iters": opts.refine_iters}
    rep = bounds.assemble_constants(
        C_f=ex["C_f"].value, C_U=ex["C_U"].value, q2_max=ex["q2"].value, p=p_val,
        l=max(0.0, l_val), l_U=lam_min.value, U_min=ex["U_min"].value, U_max=ex["U_max"].value,
        witnesses=wit, grid_meta=meta, q_mode=q_mode)
    if l_val < 0:
        rep.flags.append(f"Lambda_P/M_f maximum {l_val:.6g} < 0 clamped to l = 0")
    return rep, ex


def _ratio_l(spec, F, opts):
    """l = max_x Lambda_P(x) / M_f(x) with torus maxima taken on the phase grid."""
    phis = torus_grid(opts.torus_points, spec.k)

    def ratio(x):
        lp = np.max(F.Lambda_P_phi(phis[:, None, :], x[None]), axis=0)
        mf = np.max(F.f_norm(phis[:, None, :], x[None]), axis=0)
        return lp / mf
    ext = domain_extremize(ratio, spec, "max", opts, phase=False)
    return ext.value, ext.point


def check_all(spec, z_star_hint=None, opts=None, q_mode="default"):
    """Evaluate every hypothesis with margin and witness; returns CheckResult."""
    opts = opts or GridOptions()
    F = Fields(spec, opts.lp_angles)
    consts, ex = compute_constants(spec, opts, q_mode)
    Z = consts.z_star if z_star_hint is None else z_star_hint
    out = []
    out.append(_verdict("H1.hessian_positive", ex["lambda_U_min"]))
    descent = domain_extremize(lambda p, x: -F.dU_f(p, x), spec, "max", opts)
    out.append(_verdict("H1.descent", descent))

    def lam_II(x):
        return F.boundary_geometry(x)[1]
    out.append(_verdict("H2.egress", domain_extremize(F.nu_f, spec, "min", opts,
                                                      region="boundary"), region="boundary"))
    out.append(_verdict("H2.boundary_convex", domain_extremize(lam_II, spec, "min", opts,
                                                               phase=False, region="boundary"),
                        region="boundary"))
    mono = domain_extremize(F.monotone, spec, "min", opts)
    out.append(_verdict("H3.monotone", mono))
    curv = domain_extremize(lambda x: F.mu_U(x) - 2 * F.K(x), spec, "min", opts, phase=False)
    out.append(_verdict("H3.curvature", curv, strict=False))

    def bcond(x):
        nu, lam = F.boundary_geometry(x)
        return lam + 0.5 * np.einsum("...i,...i->...", F.grad_U(x), nu)
    out.append(_verdict("boundary", domain_extremize(bcond, spec, "min", opts, phase=False,
                                                     region="boundary"), region="boundary"))

    def pert_egress(p, x):
        return 4 * lam_II(x) * F.nu_f(p, x) - F.P_adj_nu_sq(p, x)
    pe = domain_extremize(pert_egress, spec, "min", opts, region="boundary")
    out.append(_verdict("perturbed.egress", pe, region="boundary"))
    out.append(sigma_verdict(spec, Z, opts, monotone_verdict=out[4]))
    extras = {"Z": Z, "extremes": {n: (e.value if e is not None else None) for n, e in ex.items()}}
    return CheckResult(verdicts=out, constants=consts, extras=extras)


def sigma_verdict(spec, Z, opts=None, monotone_verdict=None):
    """lambda_f + <grad U, f>/2 > sigma(phi, x; Z) over torus x closure(D)."""
    opts = opts or GridOptions()
    if not spec.has_perturbation:
        # P = 0: sigma vanishes identically and the condition is H3.monotone
        h = monotone_verdict
        if h is None:
            F = Fields(spec, opts.lp_angles)
            h = _verdict("H3.monotone", domain_extremize(F.monotone, spec, "min", opts))
        return HypothesisVerdict("perturbed.sigma", h.holds, h.margin, h.witness,
                                 dict(h.grid_meta, reduced_from="H3.monotone", Z=Z), True,
                                 h.raw_slack)
    if not math.isfinite(Z):
        return HypothesisVerdict("perturbed.sigma", False, -math.inf, (None, None),
                                 {"reason": "z_star unavailable"})
    F = Fields(spec, opts.lp_angles)
    sig = domain_extremize(lambda p, x: F.monotone(p, x) - F.sigma(p, x, Z), spec, "min", opts)
    v = _verdict("perturbed.sigma", sig)
    v.grid_meta["Z"] = Z
    return v
