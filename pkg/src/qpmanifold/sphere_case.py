"""Charged particle on the unit sphere: Coulomb attraction toward a charge at -a k,
quasiperiodic electric and magnetic fields, linear damping, domain = polar cap.
"""
from dataclasses import dataclass, field, fields
import math
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from . import bounds
from .errors import ConfigurationError
from .geometry import ScalarField, unit_sphere
from .system import SystemSpec, ToleranceSet, torus_grid

K_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SphereParams:
    a: float = 1.0
    rho: float = 0.6
    kappa: float = 0.0
    omega: tuple = (1.0, math.sqrt(2.0))
    E_amp: float = 0.05
    E_k: float = 0.0
    B_amp: float = 0.0
    coulomb_sign: float = 1.0
    E_field: Optional[Callable] = None
    B_field: Optional[Callable] = None

    def __post_init__(self):
        if self.a == 0:
            raise ConfigurationError("a = 0 puts the charge at the sphere center: degenerate Coulomb geometry")
        if not self.a > 0:
            raise ConfigurationError("a must be positive")
        if not 0 < self.rho < 1:
            raise ConfigurationError(f"rho must lie in (0, 1), got {self.rho}")
        if self.kappa < 0:
            raise ConfigurationError("kappa must be nonnegative")
        if len(self.omega) < 1:
            raise ConfigurationError("omega needs at least one frequency")

    @property
    def k(self):
        return len(self.omega)

    def E(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.E_field is not None:
            return np.asarray(self.E_field(phi), dtype=float)
        second = phi[..., 1] if self.k > 1 else phi[..., 0]
        return np.stack([self.E_amp * np.cos(phi[..., 0]), self.E_amp * np.sin(second),
                         np.full(phi.shape[:-1], self.E_k)], axis=-1)

    def B(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.B_field is not None:
            return np.asarray(self.B_field(phi), dtype=float)
        zero = np.zeros(phi.shape[:-1])
        return np.stack([zero, zero, self.B_amp * np.cos(phi[..., 0])], axis=-1)

    @property
    def has_magnetic(self):
        return self.B_field is not None or self.B_amp != 0

    def E_max(self, grid=48):
        if self.E_field is None:
            if self.k > 1:
                return math.sqrt(2 * self.E_amp**2 + self.E_k**2)
            return _torus_max(lambda p: np.linalg.norm(self.E(p), axis=-1), 1, 720)
        return _torus_max(lambda p: np.linalg.norm(self.E(p), axis=-1), self.k, grid)

    def B_max(self, grid=48):
        if self.B_field is None:
            return abs(self.B_amp)
        return _torus_max(lambda p: np.linalg.norm(self.B(p), axis=-1), self.k, grid)

    @property
    def beta(self):
        return self.B_max() / self.rho

    @property
    def varkappa(self):
        return self.kappa / self.rho

    def crossed_mode(self, grid=24):
        """E_k = 0, B parallel to k and varkappa <= beta."""
        ph = torus_grid(grid, self.k)
        ek = np.max(np.abs(self.E(ph)[..., 2]))
        bperp = np.max(np.linalg.norm(self.B(ph)[..., :2], axis=-1))
        return bool(ek == 0 and bperp == 0 and self.varkappa <= self.beta + 1e-15)


def _torus_max(fn, k, n):
    return float(np.max(fn(torus_grid(n, k))))


def demo_params(**over):
    return SphereParams(**over)


def make_spec(params, tol=None):
    """SystemSpec with analytic force, perturbation and derivative evaluators."""
    a, c, k = params.a, params.coulomb_sign, K_AXIS

    def coulomb(x):
        y = x + a * k
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        return y / r**3, y, r

    def force(phi, x):
        g, _, _ = coulomb(x)
        E = params.E(phi)
        h = c * g - E
        return -c * g + E + np.sum(h * x, axis=-1, keepdims=True) * x

    def force_jac(phi, x):
        g, y, r = coulomb(x)
        E = params.E(phi)
        h = c * g - E
        eye = np.eye(3)
        dg = eye / r[..., None] ** 3 - 3 * y[..., :, None] * y[..., None, :] / r[..., None] ** 5
        dgx = np.einsum("...ij,...i->...j", dg, x)
        outer = x[..., :, None] * (c * dgx + h)[..., None, :]
        hx = np.sum(h * x, axis=-1)[..., None, None]
        return -c * dg + outer + hx * eye

    def perturbation(phi, x, xi):
        B = params.B(phi)
        cr = np.cross(xi, B)
        return cr - np.sum(cr * x, axis=-1, keepdims=True) * x - params.kappa * xi

    def perturbation_cov(phi, x, eta, xi):
        B = params.B(phi)
        return (-np.sum(xi * eta, axis=-1, keepdims=True) * np.cross(x, B)
                - np.sum(np.cross(xi, B) * x, axis=-1, keepdims=True) * eta)

    U = ScalarField(
        value=lambda x: -np.log(x[..., 2] ** 2),
        grad=lambda x: -2 * k * (1 / x[..., 2])[..., None],
        hess=lambda x: 2 * np.einsum("i,j->ij", k, k) * (1 / x[..., 2] ** 2)[..., None, None],
    )
    rho = params.rho
    G = ScalarField(
        value=lambda x: rho - x[..., 2],
        grad=lambda x: np.broadcast_to(-k, x.shape).copy(),
        hess=lambda x: np.zeros(x.shape + (3,)),
    )

    def domain_sampler(n, seed=0):
        u = qmc.Halton(d=2, scramble=True, seed=seed).random(n)
        s = rho + (1 - rho) * u[:, 0]
        az = 2 * np.pi * u[:, 1]
        c_ = np.sqrt(1 - s**2)
        return np.stack([c_ * np.cos(az), c_ * np.sin(az), s], axis=-1)

    def boundary_sampler(n):
        az = 2 * np.pi * np.arange(n) / n
        c_ = math.sqrt(1 - rho**2)
        return np.stack([c_ * np.cos(az), c_ * np.sin(az), np.full(n, rho)], axis=-1)

    has_p = params.has_magnetic or params.kappa != 0
    return SystemSpec(
        manifold=unit_sphere(3), force=force, U=U, G=G, omega=tuple(params.omega),
        tol=tol or ToleranceSet(), perturbation=perturbation if has_p else None,
        force_jac=force_jac, perturbation_cov=perturbation_cov if has_p else None,
        domain_sampler=domain_sampler, boundary_sampler=boundary_sampler, name="sphere",
        params={"a": params.a, "rho": params.rho, "kappa": params.kappa,
                "E_amp": params.E_amp, "E_k": params.E_k, "B_amp": params.B_amp,
                "coulomb_sign": params.coulomb_sign, "omega": list(params.omega)})


# ---------------------------------------------------------------------------
# closed forms

def M_function(params, s, phi):
    """Maximum over the latitude s of -<grad U, f>/lambda_U at phase phi."""
    a, c = params.a, params.coulomb_sign
    E = params.E(phi)
    eh = np.sqrt(E[..., 0] ** 2 + E[..., 1] ** 2)
    w = np.sqrt(1 - s**2)
    return (-c * a * (1 - s**2) / (s * (1 + 2 * s * a + a * a) ** 1.5)
            + (1 - s**2) * E[..., 2] / s + w * eh)


def q_squared(params, torus_points=24, s_points=801):
    ph = torus_grid(torus_points, params.k)
    s = np.linspace(params.rho, 1.0, s_points)
    vals = M_function(params, s[None, :], ph[:, None, :])
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    lo, hi = s[max(j - 1, 0)], s[min(j + 1, s.size - 1)]
    gr = (math.sqrt(5) - 1) / 2
    phi = ph[i]
    for _ in range(80):
        c1, c2 = hi - gr * (hi - lo), lo + gr * (hi - lo)
        if M_function(params, c1, phi) > M_function(params, c2, phi):
            hi = c2
        else:
            lo = c1
    s_best = 0.5 * (lo + hi)
    return max(float(vals[i, j]), float(M_function(params, s_best, phi))), s_best, phi


def p_function(params, s):
    b, vk = params.beta, params.varkappa
    return np.sqrt((1 - s**2) * (b * b * s * s + vk * vk))


def p_closed(params):
    b, vk = params.beta, params.varkappa
    if b == 0 and vk == 0:
        return 0.0, True
    if vk <= b:
        return (b * b + vk * vk) / (2 * b), True
    s = np.linspace(0, 1, 20001)
    return float(np.max(p_function(params, s))), False


def M_P_closed(params, s):
    return params.rho * np.sqrt(params.beta**2 * s**2 + params.varkappa**2)


def M_PU_closed(params, s):
    return 2 * params.rho * np.sqrt((1 - s**2) * (params.beta**2 * s**2 + params.varkappa**2)) / s


def M_U_closed(s):
    return 2 * np.sqrt(1 - s**2) / s


def L_P_closed(params, phi, x):
    return np.linalg.norm(params.B(phi), axis=-1) * np.sqrt(1 - x[..., 2] ** 2)


def lambda_II_closed(rho):
    return rho / math.sqrt(1 - rho * rho)


def grad_U_normal_closed(rho):
    return 2 * math.sqrt(1 - rho * rho) / rho


def C_U_closed(rho):
    return 2 * math.sqrt(1 - rho * rho) / rho


def C_f_closed(params):
    return 0.5 * (params.E_max() + 1 / (1 + 2 * params.a * params.rho + params.a**2))


def l_closed(params):
    a, E = params.a, params.E_max()
    return (1 + a) ** 2 * params.varkappa * params.rho / ((1 + a) ** 2 * E + 1)


def monotone_lower_bound(params, phi):
    """a/(1+a)^3 - <E(phi), k>, the pointwise lower bound at the pole."""
    return params.coulomb_sign * params.a / (1 + params.a) ** 3 - params.E(phi)[..., 2]


def closed_form_constants(params):
    notes = []
    q2, s_w, phi_w = q_squared(params)
    p, ok = p_closed(params)
    if not ok:
        notes.append("varkappa > beta: p from numeric maximization of the closed-form profile")
    if not params.crossed_mode():
        notes.append("fields outside the crossed E/B mode: closed forms are bounds only")
    C_f = C_f_closed(params)
    C_U = C_U_closed(params.rho)
    l = l_closed(params)
    rep = bounds.assemble_constants(C_f=C_f, C_U=C_U, q2_max=q2, p=p, l=l, l_U=2.0, U_min=0.0,
                                    U_max=-2 * math.log(params.rho),
                                    witnesses={"q2": ([float(v) for v in phi_w], [s_w])})
    rep.flags.extend(notes)
    extra = {"lambda_U": 2.0, "lambda_II": lambda_II_closed(params.rho),
             "grad_U_normal": grad_U_normal_closed(params.rho), "q2": q2, "E": params.E_max(),
             "beta": params.beta, "varkappa": params.varkappa}
    return rep, extra


def min_nu_f_closed(params):
    """Minimum over the torus of min_{boundary} <n, f>."""
    a, r, c = params.a, params.rho, params.coulomb_sign
    ph = torus_grid(48, params.k)
    E = params.E(ph)
    eh = np.sqrt(E[..., 0] ** 2 + E[..., 1] ** 2)
    vals = math.sqrt(1 - r * r) * (c * a / (1 + 2 * r * a + a * a) ** 1.5 - E[..., 2]) - r * eh
    return float(np.min(vals))


@dataclass
class FeasibilityVerdict:
    name: str
    holds: bool
    margin: float
    method: str = "exact"

    def as_dict(self):
        return {"name": self.name, "holds": self.holds, "margin": self.margin,
                "method": self.method}


def feasibility(params, z_star=None):
    a, r, c = params.a, params.rho, params.coulomb_sign
    b, vk = params.beta, params.varkappa
    E = params.E_max()
    consts, _ = closed_form_constants(params)
    zs = consts.z_star if z_star is None else z_star
    out = []
    ph = torus_grid(48, params.k)
    unpert = float(np.min(monotone_lower_bound(params, ph)))
    out.append(FeasibilityVerdict("unperturbed", unpert > 0, unpert))

    lhs1 = c * a / (1 + 2 * r * a + a * a) ** 1.5
    rhs1 = E * r / math.sqrt(1 - r * r) + (b * b * r * r + vk * vk) * r / 2
    out.append(FeasibilityVerdict("perturbed.display1", lhs1 > rhs1, lhs1 - rhs1))

    s = np.linspace(r, 1.0, 4001)
    disp2 = (c * a / (1 + 2 * a * s + a * a) ** 1.5
             - zs * r * np.sqrt(1 - s * s) * (2 * np.sqrt(b * b * s * s + vk * vk) + b)
             - s * r * r * (b * b * s * s + vk * vk) / 4)
    m2 = float(np.min(disp2))
    out.append(FeasibilityVerdict("perturbed.display2", m2 > 0, m2))

    if vk > b:
        # the combined display needs varkappa <= beta; the pointwise one still applies
        out.append(FeasibilityVerdict("perturbed.combined", m2 > 0, m2, "pointwise_fallback"))
        return out
    coef = (2 * b * b + vk * vk) / b + r * (b * b + vk * vk) / 4 if b > 0 else 0.0
    second = r * E / math.sqrt(1 - r * r) + r * (b * b * r * r + vk * vk) / 2
    target = c * a / (1 + a) ** 3
    zp, q, l = consts.z_plus, consts.q, consts.l
    cheap = None
    if q > 0 and l < zp / (q * q):
        rz = r * zp + math.sqrt(r * zp / q) * (1 - r * r) ** 0.25 * (1 + l * zp) * math.sqrt(
            E + 1 / (1 + a * a))
        cheap = target - max(rz * coef, second)
    if cheap is not None and cheap > 0:
        out.append(FeasibilityVerdict("perturbed.combined", True, cheap, "cheap_estimate"))
    else:
        exact = target - max(r * zs * coef, second)
        out.append(FeasibilityVerdict("perturbed.combined", exact > 0, exact, "z_star"))
    return out


@dataclass(frozen=True)
class CaseStudyBudget:
    grid: int = 24
    domain_samples: int = 2000
    refine_iters: int = 400
    horizon: float = 5000.0
    hull_grid: int = 64
    search_horizon: float = 60.0
    search_seeds: int = 200
    burn: float = 50.0
    window_tol: float = 1e-6
    gap_tol: float = 0.01
    renorm_dt: float = 1.0
    dt_out: float = 0.05
    seed: int = 0
    second_seed: Optional[int] = 1
    uniqueness_tol: float = 1e-6
    diagnostic_iters: int = 10


@dataclass
class CaseStudyReport:
    params: dict
    stages: dict = field(default_factory=dict)
    verdict: bool = False
    failed_stage: Optional[str] = None
    artifacts: dict = field(default_factory=dict)

    def summary(self):
        return {"params": self.params, "stages": self.stages, "verdict": self.verdict,
                "failed_stage": self.failed_stage}


def cross_validation(params, spec, check, opts):
    """Generic-optimizer values next to their closed forms."""
    from .hypotheses import Fields, samples_for
    closed, extra = closed_form_constants(params)
    gen = check.constants
    F = Fields(spec, opts.lp_angles)
    _, bnd = samples_for(spec, opts)
    nu, lam = F.boundary_geometry(bnd)
    gUn = np.einsum("...i,...i->...", F.grad_U(bnd), nu)
    rows = [
        ("lambda_U", check.verdict("H1.hessian_positive").margin, extra["lambda_U"], "equal"),
        ("C_U", gen.C_U, closed.C_U, "equal"),
        ("lambda_II", float(np.min(lam)), extra["lambda_II"], "equal"),
        ("grad_U_normal", float(np.max(gUn)), extra["grad_U_normal"], "equal"),
        ("q", gen.q, closed.q, "equal"),
        ("C_f", gen.C_f, closed.C_f, "closed form bounds generic"),
        ("p", gen.p, closed.p, "closed form bounds generic"),
        ("l", gen.l, closed.l, "reported side by side"),
        ("z_plus", gen.z_plus, closed.z_plus, "follows p, q"),
        ("z_star", gen.z_star, closed.z_star, "follows C_f, p, q, l"),
        ("d", gen.d, closed.d, "equal"),
    ]
    return [{"name": n, "generic": float(g), "closed_form": float(c),
             "abs_diff": float(abs(g - c)), "relation": rel} for n, g, c, rel in rows]


def _stage(report, name, fn):
    """Run one pipeline stage; record failure and return None on error."""
    import time
    from .errors import ToolkitError
    t0 = time.perf_counter()
    try:
        out = fn()
    except ToolkitError as exc:
        report.stages[name] = {"stage": "failed", "error": f"{type(exc).__name__}: {exc}",
                               "diagnostics": _plain(getattr(exc, "diagnostics", {}))}
        report.failed_stage = report.failed_stage or name
        report.artifacts.setdefault("timings", {})[name] = time.perf_counter() - t0
        return None
    report.artifacts.setdefault("timings", {})[name] = time.perf_counter() - t0
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _monitor_checks(traj, consts, tol=1e-6):
    sup_v = float(np.max(traj.monitors["speed"]))
    sup_vU = float(np.max(np.abs(traj.monitors["v_U"])))
    return {"sup_speed": sup_v, "z_star": consts.z_star,
            "speed_bound": bool(sup_v <= consts.z_star),
            "sup_v_U": sup_vU, "v_U_bound_value": consts.C_U * consts.z_plus,
            "v_U_bound": bool(sup_vU <= consts.C_U * consts.z_plus + tol),
            "max_G": float(np.max(traj.monitors["G"])),
            "inside": bool(np.max(traj.monitors["G"]) < 0),
            "min_height": float(np.min(traj.x[:, 2])),
            "max_residual": float(np.max(traj.monitors["residual"]))}


def run_case_study(params, budget=None):
    """Feasibility, hypothesis check, bounded solution, hull and hyperbolicity certificate.

    Feasibility, checking and the escape-time search always run; the solution
    stages run only when every earlier verdict holds.
    """
    from . import dichotomy, finder, hypotheses
    budget = budget or CaseStudyBudget()
    spec = make_spec(params)
    rep = CaseStudyReport(params=_params_dict(params))
    feas = feasibility(params)
    rep.stages["feasibility"] = {"verdicts": [v.as_dict() for v in feas],
                                 "holds": all(v.holds for v in feas)}
    opts = hypotheses.GridOptions(torus_points=budget.grid, domain_samples=budget.domain_samples,
                                  refine_iters=budget.refine_iters, seed=budget.seed)
    check = _stage(rep, "check", lambda: hypotheses.check_all(spec, opts=opts))
    if check is None:
        return rep
    consts = check.constants
    rep.stages["check"] = {"verdicts": [v.as_dict() for v in check.verdicts],
                           "holds": check.all_hold, "Z": check.extras["Z"]}
    rep.stages["constants"] = {"generic": consts.scalars(), "flags": consts.flags,
                               "witnesses": _plain(consts.witnesses)}
    rep.stages["cross_validation"] = cross_validation(params, spec, check, opts)

    wopts = finder.WindowOptions(dt_out=budget.dt_out, search_horizon=budget.search_horizon,
                                 seed=budget.seed)
    premises_ok = rep.stages["feasibility"]["holds"] and check.all_hold
    # with a failed premise the search is only a diagnostic, so its budget is capped
    sbud = finder.SearchBudget(seeds=budget.search_seeds, seed=budget.seed,
                               max_iter=60 if premises_ok else budget.diagnostic_iters)
    window = (0.0, budget.horizon)
    s0 = finder.window_start(window, budget.burn, wopts)
    search = _stage(rep, "search", lambda: finder.waszewski_search(
        spec, s0, budget.search_horizon, sbud, z_plus=consts.z_plus))
    if search is None:
        return rep
    rep.stages["search"] = _plain(search.summary())
    rep.stages["search"]["holds"] = search.ok
    rep.stages["search"]["diagnostic"] = not premises_ok
    if not (premises_ok and search.ok):
        rep.failed_stage = next(n for n, ok in (("feasibility", rep.stages["feasibility"]["holds"]),
                                                ("check", check.all_hold),
                                                ("search", search.ok)) if not ok)
        return rep

    def solve(seed, first):
        wo = finder.WindowOptions(dt_out=budget.dt_out, search_horizon=budget.search_horizon,
                                  seed=seed)
        sb = finder.SearchBudget(seeds=budget.search_seeds, seed=seed)
        return finder.bounded_solution(spec, window, budget.burn, budget.window_tol, wo, sb,
                                       z_plus=consts.z_plus, z_star=consts.z_star, search=first)

    traj = _stage(rep, "bounded_solution", lambda: solve(budget.seed, search))
    if traj is None:
        return rep
    mon = _monitor_checks(traj, consts)
    rep.stages["bounded_solution"] = {
        "levels": _plain(traj.step_meta["levels"]), "monitors": mon,
        "holds": bool(mon["inside"] and mon["speed_bound"] and mon["v_U_bound"])}
    rep.artifacts["trajectory"] = traj
    ok = rep.stages["bounded_solution"]["holds"]

    if budget.second_seed is not None:
        traj2 = _stage(rep, "second_seed", lambda: solve(budget.second_seed, None))
        if traj2 is not None:
            d = consts.d if math.isfinite(consts.d) else np.inf
            uq = _stage(rep, "uniqueness", lambda: finder.uniqueness_probe(
                spec, traj, traj2, d_bound=d, tol=budget.uniqueness_tol))
            if uq is not None:
                rep.stages["uniqueness"] = dict(uq.summary(), holds=bool(
                    uq.orbit_distance <= budget.uniqueness_tol))
                ok = ok and rep.stages["uniqueness"]["holds"]
                rep.artifacts["trajectory2"] = traj2
        ok = ok and traj2 is not None

    hull = _stage(rep, "hull", lambda: finder.hull_extract(traj, spec.omega, budget.hull_grid))
    if hull is not None:
        rep.stages["hull"] = dict(hull.summary(), holds=bool(hull.residual <= 1e-4))
        rep.artifacts["hull"] = hull
        ok = ok and rep.stages["hull"]["holds"]
    else:
        ok = False

    cert = _stage(rep, "dichotomy", lambda: dichotomy.certify(
        spec, traj, gap_tol=budget.gap_tol, renorm_dt=budget.renorm_dt, opts=opts))
    if cert is not None:
        rep.stages["dichotomy"] = _plain(cert.summary())
        rep.stages["dichotomy"]["holds"] = cert.verdict
        rep.artifacts["dichotomy"] = cert
        ok = ok and cert.verdict
    else:
        ok = False
    rep.verdict = bool(ok and rep.failed_stage is None)
    if not rep.verdict and rep.failed_stage is None:
        rep.failed_stage = next((n for n, st in rep.stages.items()
                                 if isinstance(st, dict) and st.get("holds") is False), None)
    return rep


def _params_dict(params):
    out = {}
    for f in fields(params):
        v = getattr(params, f.name)
        out[f.name] = "<callable>" if callable(v) else _plain(v)
    return out
