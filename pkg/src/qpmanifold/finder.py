"""Bounded solution: escape-time search, windowed boundary value solve, hull and uniqueness."""
from dataclasses import dataclass, field
import csv
import logging
import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .dynamics import build_trajectory, connect, integrate_batch
from .errors import ConfigurationError, ConvergenceError, SamplingError, StiffnessError
from .hypotheses import sample_boundary, sample_domain
from .system import averaged_field, wrap

log = logging.getLogger(__name__)

IMMEDIATE = 1e-3  # escape durations below this count as immediate exits


def choose_eps(spec, X, z_plus):
    """eps = min(1, 0.5 z_plus / max |fbar|) over the seed points."""
    fb = averaged_field(spec, X)
    mx = float(np.max(np.linalg.norm(fb, axis=-1)))
    return 1.0 if mx == 0 else min(1.0, 0.5 * z_plus / mx), fb


def escape_times(spec, s, X0, eps, horizon, phase_ref=None, rtol=1e-10, atol=1e-12, fbar=None):
    """Exit times of trajectories started at time s from (x, eps fbar(x)); inf when censored."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    fb = averaged_field(spec, X0) if fbar is None else fbar
    out = np.full(X0.shape[0], np.inf)
    on_bnd = spec.G(X0) >= -spec.tol.boundary_tol
    out[on_bnd] = s
    live = ~on_bnd
    if live.any():
        ref = None if phase_ref is None else np.broadcast_to(phase_ref, (X0.shape[0], spec.k))[live]
        sol = integrate_batch(spec, s, X0[live], eps * fb[live], s + horizon, ref, rtol=rtol,
                              atol=atol, t_eval=[s + horizon], stop_on_exit=True)
        st = sol.stop_t
        out[live] = np.where(np.isfinite(st), st, np.inf)
    return out


def escape_time(spec, s, x0, eps, horizon, **kw):
    return float(escape_times(spec, s, np.asarray(x0)[None], eps, horizon, **kw)[0])


@dataclass(frozen=True)
class SearchBudget:
    seeds: int = 200
    refine_top: int = 5
    grid: int = 7
    shrink: float = 3.0
    max_iter: int = 60
    start_horizon: float = 10.0
    egress_probe: int = 32
    egress_depth: float = 1e-3
    egress_time: float = 10.0
    seed: int = 0


@dataclass
class SearchReport:
    x0: np.ndarray
    v0: np.ndarray
    s: float
    escape_time: float
    horizon: float
    eps: float
    status: str
    trace: list = field(default_factory=list)
    egress: dict = field(default_factory=dict)
    window: object = None
    hull: object = None
    uniqueness: object = None

    @property
    def ok(self):
        return self.status == "censored"

    def summary(self):
        return {"x0": self.x0.tolist(), "v0": self.v0.tolist(), "s": self.s,
                "escape_time": self.escape_time, "horizon": self.horizon, "eps": self.eps,
                "status": self.status, "trace": self.trace, "egress": self.egress}


def _egress_check(spec, s, eps, budget, phase_ref):
    """Starts just inside the boundary must leave quickly when the force pushes outward."""
    M = spec.manifold
    xb = sample_boundary(spec, budget.egress_probe, budget.seed)
    from .geometry import grad_on_manifold
    g = grad_on_manifold(M, spec.G, xb)
    nu = g / np.linalg.norm(g, axis=-1, keepdims=True)
    xi = M.retract(xb - budget.egress_depth * nu)
    T = escape_times(spec, s, xi, eps, budget.egress_time, phase_ref)
    worst = float(np.max(T - s))
    return {"probes": int(xi.shape[0]), "worst_exit_duration": worst,
            "limit": budget.egress_time, "holds": bool(np.isfinite(worst))}


def waszewski_search(spec, s, horizon, budget=None, z_plus=None, phase_ref=None):
    """Maximize the escape time over starts (x, eps fbar(x)) at time s.

    Seeds are quasi-random domain points; the best few are polished by an
    elitist local grid that shrinks around its best node, raising the horizon
    whenever the current best is censored.
    """
    budget = budget or SearchBudget()
    M = spec.manifold
    seeds = sample_domain(spec, budget.seeds, budget.seed)
    seeds = seeds[spec.G(seeds) < -spec.tol.boundary_tol]
    zp = z_plus if z_plus is not None else 1.0
    eps, fb = choose_eps(spec, seeds, zp)
    egress = _egress_check(spec, s, eps, budget, phase_ref)
    if not egress["holds"]:
        return SearchReport(x0=seeds[0], v0=eps * fb[0], s=s, escape_time=math.nan,
                            horizon=horizon, eps=eps, status="egress_failed", egress=egress)
    h = min(budget.start_horizon, horizon)
    T = escape_times(spec, s, seeds, eps, h, phase_ref, fbar=fb)
    dur = np.where(np.isfinite(T), T - s, np.inf)
    if np.all(dur < IMMEDIATE):
        return SearchReport(x0=seeds[0], v0=eps * fb[0], s=s, escape_time=float(T[0]),
                            horizon=horizon, eps=eps, status="all_exit_immediately",
                            egress=egress)
    order = np.argsort(-np.minimum(dur, h), kind="stable")[:budget.refine_top]
    centers = seeds[order]
    bases = M.tangent_basis(centers)
    coords = np.zeros((centers.shape[0], M.dim))
    spacing = math.sqrt(1.0 / budget.seeds)
    radius = np.full(centers.shape[0], spacing)
    best = np.minimum(dur[order], h)
    trace = [{"iter": 0, "horizon": h, "best": float(np.max(best)), "radius": spacing}]
    lin = np.linspace(-1.0, 1.0, budget.grid)
    offs = np.stack(np.meshgrid(*([lin] * M.dim), indexing="ij"), -1).reshape(-1, M.dim)
    for it in range(1, budget.max_iter + 1):
        pts_c = coords[:, None, :] + radius[:, None, None] * offs[None]
        amb = M.retract(centers[:, None, :] + np.einsum("cim,cgm->cgi", bases, pts_c))
        flat = amb.reshape(-1, M.ambient_dim)
        inside = spec.G(flat) < -spec.tol.boundary_tol
        vals = np.full(flat.shape[0], -np.inf)
        if inside.any():
            Tg = escape_times(spec, s, flat[inside], eps, h, phase_ref)
            vals[inside] = np.minimum(np.where(np.isfinite(Tg), Tg - s, np.inf), h)
        vals = vals.reshape(centers.shape[0], -1)
        j = np.argmax(vals, axis=1)
        cand = vals[np.arange(vals.shape[0]), j]
        better = cand >= best
        coords[better] = pts_c[better, j[better]]
        best = np.where(better, cand, best)
        radius = radius / budget.shrink
        top = float(np.max(best))
        trace.append({"iter": it, "horizon": h, "best": top, "radius": float(np.max(radius))})
        if top >= h:
            if h >= horizon:
                break
            h = min(2 * h, horizon)
            # re-evaluate the elite at the longer horizon; censored values only grow
            xs = M.retract(centers + np.einsum("cim,cm->ci", bases, coords))
            Tb = escape_times(spec, s, xs, eps, h, phase_ref)
            best = np.minimum(np.where(np.isfinite(Tb), Tb - s, np.inf), h)
            radius = radius * budget.shrink**2
        if np.max(radius) < 1e-15:
            break
    ib = int(np.argmax(best))
    xb = M.retract(centers[ib] + bases[ib] @ coords[ib])
    fbx = averaged_field(spec, xb[None])[0]
    status = "censored" if best[ib] >= horizon else "not_censored"
    esc = math.inf if status == "censored" else s + float(best[ib])
    return SearchReport(x0=xb, v0=eps * fbx, s=s, escape_time=esc, horizon=horizon, eps=eps,
                        status=status, trace=trace, egress=egress)


# ---------------------------------------------------------------------------
# windowed boundary value problem

@dataclass(frozen=True)
class WindowOptions:
    node_dt: float = 1.0
    dt_out: float = 0.05
    max_doublings: int = 4
    newton_tol: float = 1e-11
    newton_iter: int = 30
    fd_step: float = 1e-7
    rtol: float = 1e-11
    atol: float = 1e-13
    search_horizon: float = 60.0
    seed: int = 0
    search_each_level: bool = True
    max_jitter_nodes: int = 8
    # per-segment step budget; a trial node near the Coulomb singularity exhausts it
    segment_steps: int = 20_000


class _Shooting:
    """Multiple shooting with node states in local tangent coordinates."""

    def __init__(self, spec, t_nodes, eps, phase0, opts):
        self.spec, self.t, self.eps, self.opts = spec, t_nodes, eps, opts
        self.M = spec.manifold
        self.N, self.m = self.M.ambient_dim, self.M.dim
        om = np.asarray(spec.omega, dtype=float)
        self.ref = wrap(phase0[None, :] + t_nodes[:, None] * om[None, :])

    def perturbed(self, X, V, d):
        """Node states moved by tangent coordinates d = (dx, dv) per node."""
        B = self.M.tangent_basis(X)
        x = self.M.retract(X + np.einsum("nim,nm->ni", B, d[:, :self.m]))
        v = self.M.project(x, V + np.einsum("nim,nm->ni", B, d[:, self.m:]))
        return x, v

    def flow(self, X, V, nodes):
        sol = integrate_batch(self.spec, 0.0, X, V, self.opts.node_dt, self.ref[nodes],
                              rtol=self.opts.rtol, atol=self.opts.atol,
                              t_eval=[self.opts.node_dt], max_steps=self.opts.segment_steps)
        y = sol.y[-1]
        return y[:, :self.N], y[:, self.N:]

    def bc(self, X, V):
        B = self.M.tangent_basis(X)
        fb = averaged_field(self.spec, X)
        return np.einsum("nim,ni->nm", B, V - self.eps * fb)

    def residual(self, X, V, with_jac=False):
        n, m2 = X.shape[0], 2 * self.m
        seg = np.arange(n - 1)
        h = self.opts.fd_step
        if with_jac:
            pert = np.vstack([np.zeros(m2), h * np.eye(m2)])
            reps = pert.shape[0]
            Xs = np.repeat(X[:-1], reps, axis=0)
            Vs = np.repeat(V[:-1], reps, axis=0)
            ds = np.tile(pert, (n - 1, 1))
            Xs, Vs = self.perturbed(Xs, Vs, ds)
            Xe, Ve = self.flow(Xs, Vs, np.repeat(seg, reps))
            Xe = Xe.reshape(n - 1, reps, self.N)
            Ve = Ve.reshape(n - 1, reps, self.N)
        else:
            Xe, Ve = self.flow(X[:-1], V[:-1], seg)
            Xe, Ve = Xe[:, None], Ve[:, None]
        Bn = self.M.tangent_basis(X[1:])
        rx = np.einsum("nim,nri->nrm", Bn, Xe - X[1:, None])
        rv = np.einsum("nim,nri->nrm", Bn, Ve - V[1:, None])
        r = np.concatenate([rx, rv], axis=-1)  # (n-1, reps, 2m)
        left, right = self.bc(X[:1], V[:1])[0], self.bc(X[-1:], V[-1:])[0]
        res = np.concatenate([left, r[:, 0].ravel(), right])
        if not with_jac:
            return res, None
        D = (r[:, 1:] - r[:, :1]) / h  # (n-1, 2m, 2m) rows=perturbation
        J = self._assemble(X, V, np.swapaxes(D, 1, 2))
        return res, J

    def _bc_jac(self, x, v):
        h = self.opts.fd_step
        m2 = 2 * self.m
        base = self.bc(x[None], v[None])[0]
        cols = []
        for j in range(m2):
            d = np.zeros((1, m2))
            d[0, j] = h
            xp, vp = self.perturbed(x[None], v[None], d)
            # express in the basis at the unperturbed node to first order
            cols.append((self.bc(xp, vp)[0] - base) / h)
        return np.stack(cols, axis=1)

    def _assemble(self, X, V, D):
        n, m, m2 = X.shape[0], self.m, 2 * self.m
        rows, cols, vals = [], [], []

        def put(r0, c0, blk):
            rr, cc = np.meshgrid(np.arange(blk.shape[0]), np.arange(blk.shape[1]), indexing="ij")
            rows.append((r0 + rr).ravel())
            cols.append((c0 + cc).ravel())
            vals.append(blk.ravel())

        put(0, 0, self._bc_jac(X[0], V[0]))
        seg = np.arange(n - 1)
        rr, cc = np.meshgrid(np.arange(m2), np.arange(m2), indexing="ij")
        base_r = m + m2 * seg
        rows.append((base_r[:, None, None] + rr).ravel())
        cols.append((m2 * seg[:, None, None] + cc).ravel())
        vals.append(D.ravel())
        rows.append((base_r[:, None] + np.arange(m2)).ravel())
        cols.append((m2 * (seg + 1)[:, None] + np.arange(m2)).ravel())
        vals.append(np.full((n - 1) * m2, -1.0))
        put(m + m2 * (n - 1), m2 * (n - 1), self._bc_jac(X[-1], V[-1]))
        size = m2 * n
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size, size))

    def solve(self, X, V):
        m2 = 2 * self.m
        hist = []
        for it in range(self.opts.newton_iter):
            res, J = self.residual(X, V, with_jac=True)
            err = float(np.max(np.abs(res)))
            hist.append(err)
            if err <= self.opts.newton_tol:
                return X, V, hist
            d = -spsolve(J, res)
            lam = 1.0
            while True:
                Xt, Vt = self.perturbed(X, V, lam * d.reshape(-1, m2))
                et = math.inf
                if np.max(self.spec.G(Xt)) < 0:
                    try:
                        rt, _ = self.residual(Xt, Vt)
                        et = float(np.max(np.abs(rt)))
                    except StiffnessError:
                        pass
                if et < err:
                    break
                if lam < 1e-3:
                    raise ConvergenceError("multiple shooting line search stalled", history=hist)
                lam *= 0.5
            X, V = Xt, Vt
            if et <= self.opts.newton_tol:
                hist.append(et)
                return X, V, hist
        raise ConvergenceError("multiple shooting Newton did not converge", history=hist)


def _nearest_phase(phases, pool):
    """Index into pool of the closest torus point for each row of phases."""
    diff = np.abs(phases[:, None, :] - pool[None, :, :])
    diff = np.minimum(diff, 2 * math.pi - diff)
    return np.argmin(np.sum(diff ** 2, axis=-1), axis=1)


def _initial_nodes(spec, t_nodes, search, phase0, opts):
    """Node guesses: the search candidate's trajectory while it lasts, then its start point."""
    N = spec.manifold.ambient_dim
    X = np.repeat(search.x0[None], t_nodes.size, axis=0)
    V = np.repeat(search.v0[None], t_nodes.size, axis=0)
    stay = (search.horizon if not math.isfinite(search.escape_time)
            else search.escape_time - search.s)
    upto = t_nodes[t_nodes <= t_nodes[0] + 0.8 * stay]
    if upto.size > 1:
        ref = wrap(phase0)[None]
        sol = integrate_batch(spec, t_nodes[0], search.x0[None], search.v0[None], upto[-1],
                              ref, rtol=opts.rtol, atol=opts.atol, t_eval=upto)
        Y = sol.y[:, 0]
        ok = np.all(np.isfinite(Y), axis=1)
        X[:upto.size][ok] = Y[ok, :N]
        V[:upto.size][ok] = Y[ok, N:]
    return X, V


def _dense(spec, sh, X, V, t_nodes, t_a, t_b, dt_out):
    """Resample the converged shooting solution on the output grid of [t_a, t_b]."""
    opts = sh.opts
    N = spec.manifold.ambient_dim
    sel = np.nonzero((t_nodes >= t_a - 1e-9) & (t_nodes < t_b - 1e-9))[0]
    per = int(round(opts.node_dt / dt_out))
    t_loc = dt_out * np.arange(per + 1)
    sol = integrate_batch(spec, 0.0, X[sel], V[sel], opts.node_dt, sh.ref[sel], rtol=opts.rtol,
                          atol=opts.atol, t_eval=t_loc)
    Y = np.swapaxes(sol.y[:-1], 0, 1).reshape(-1, 2 * N)  # drop the duplicated segment end
    t = (t_nodes[sel][:, None] + t_loc[None, :-1]).ravel()
    last = np.nonzero(np.isclose(t_nodes, t_b))[0]
    Y = np.vstack([Y, np.concatenate([X[last[0]], V[last[0]]])[None]])
    t = np.append(t, t_b)
    om = np.asarray(spec.omega)
    phi = wrap(sh.ref[0][None, :] + (t - t_nodes[0])[:, None] * om)
    return t, Y[:, :N], Y[:, N:], phi


def window_start(window, burn, opts):
    """Left end of the first burn level for these options (where the search starts)."""
    rng = np.random.default_rng(opts.seed)
    jitter = int(rng.integers(0, opts.max_jitter_nodes + 1)) * opts.node_dt
    return window[0] - math.ceil(burn / opts.node_dt) * opts.node_dt - jitter


def bounded_solution(spec, window, burn=50.0, tol=1e-6, opts=None, budget=None, z_plus=None,
                     z_star=None, phase0=None, search=None):
    """Bounded solution on window = (t_a, t_b) as the limit of growing burn-in.

    For each burn level the interval [t_a - burn, t_b + burn] is solved by
    multiple shooting with starts (x, eps fbar(x)) at both ends; the escape-time
    search at the left end provides the first guess. Burn doubles until two
    successive levels agree to tol on the window.
    """
    opts = opts or WindowOptions()
    budget = budget or SearchBudget(seed=opts.seed)
    t_a, t_b = map(float, window)
    per = opts.node_dt / opts.dt_out
    if abs(per - round(per)) > 1e-9 or ((t_b - t_a) / opts.node_dt) % 1 > 1e-9:
        raise ConfigurationError("node_dt must be a multiple of dt_out and divide the window")
    phase0 = np.zeros(spec.k) if phase0 is None else np.asarray(phase0, dtype=float)
    rng = np.random.default_rng(opts.seed)
    jitter = int(rng.integers(0, opts.max_jitter_nodes + 1)) * opts.node_dt
    prev = None
    levels = []
    X = V = None
    t_nodes_prev = ref_prev = None
    b = burn
    for level in range(opts.max_doublings + 1):
        left = t_a - math.ceil(b / opts.node_dt) * opts.node_dt - jitter
        right = t_b + math.ceil(b / opts.node_dt) * opts.node_dt
        t_nodes = left + opts.node_dt * np.arange(int(round((right - left) / opts.node_dt)) + 1)
        if search is not None and level == 0 and not math.isclose(search.s, left):
            search = None
        if search is None or (level > 0 and opts.search_each_level):
            search = waszewski_search(spec, left, opts.search_horizon, budget, z_plus,
                                      phase_ref=phase0[None])
            if not search.ok:
                raise ConvergenceError(f"escape-time search failed: {search.status}",
                                       search=search.summary())
        sh = _Shooting(spec, t_nodes, search.eps, phase0, opts)
        X0, V0 = _initial_nodes(spec, t_nodes, search, phase0, opts)
        if X is not None:
            # reuse the previous level on the overlap
            idx = np.searchsorted(t_nodes_prev, t_nodes)
            hit = (idx < t_nodes_prev.size) & np.isclose(
                t_nodes_prev[np.minimum(idx, t_nodes_prev.size - 1)], t_nodes)
            X0[hit], V0[hit] = X[idx[hit]], V[idx[hit]]
            # elsewhere take the previous node closest in forcing phase
            near = _nearest_phase(sh.ref[~hit], ref_prev)
            X0[~hit], V0[~hit] = X[near], V[near]
        X, V, hist = sh.solve(X0, V0)
        t_nodes_prev, ref_prev = t_nodes, sh.ref
        t, xs, vs, phi = _dense(spec, sh, X, V, t_nodes, t_a, t_b, opts.dt_out)
        rec = {"burn": b, "nodes": int(t_nodes.size), "newton": hist, "search": search.summary()}
        if prev is not None:
            disc = float(max(np.max(np.abs(xs - prev[1])), np.max(np.abs(vs - prev[2]))))
            rec["discrepancy"] = disc
        levels.append(rec)
        if prev is not None and rec["discrepancy"] < tol:
            break
        prev = (t, xs, vs)
        b *= 2
    else:
        raise ConvergenceError("window solutions did not settle under burn doubling",
                               levels=[{k: r.get(k) for k in ("burn", "discrepancy")}
                                       for r in levels])
    meta = {"levels": levels, "jitter": jitter, "eps": search.eps, "window": [t_a, t_b]}
    traj = build_trajectory(spec, t, xs, vs, phi, meta)
    sup_v = float(np.max(traj.monitors["speed"]))
    meta["sup_speed"] = sup_v
    meta["max_G"] = float(np.max(traj.monitors["G"]))
    meta["inside"] = bool(meta["max_G"] < 0)
    if z_star is not None:
        meta["speed_bound_ok"] = bool(sup_v <= z_star + tol)
    return traj


# ---------------------------------------------------------------------------
# hull function

@dataclass
class HullFunction:
    grid: int
    k: int
    values: np.ndarray  # (grid**k, N)
    residual: float
    holdout_residual: float
    fill: float
    manifold: object = None

    def _weights(self, phi):
        n, k = self.grid, self.k
        u = wrap(np.atleast_2d(phi)) * n / (2 * np.pi)
        i0 = np.floor(u).astype(int) % n
        fr = u - np.floor(u)
        idx, w = [], []
        for corner in range(2**k):
            bits = [(corner >> d) & 1 for d in range(k)]
            ii = np.zeros(u.shape[0], dtype=int)
            ww = np.ones(u.shape[0])
            for d in range(k):
                ii = ii * n + (i0[:, d] + bits[d]) % n
                ww = ww * (fr[:, d] if bits[d] else 1 - fr[:, d])
            idx.append(ii)
            w.append(ww)
        return np.stack(idx, 1), np.stack(w, 1)

    def __call__(self, phi):
        idx, w = self._weights(phi)
        x = np.einsum("sc,sci->si", w, self.values[idx])
        if self.manifold is not None:
            x = self.manifold.retract(x)
        return x if np.ndim(phi) > 1 else x[0]

    def nodes(self):
        axis = 2 * np.pi * np.arange(self.grid) / self.grid
        mesh = np.meshgrid(*([axis] * self.k), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_csv(self, path):
        ph = self.nodes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"phi{i + 1}" for i in range(self.k)]
                       + [f"x{i + 1}" for i in range(self.values.shape[1])])
            for p, x in zip(ph, self.values):
                w.writerow([format(float(v), ".17g") for v in list(p) + list(x)])

    def summary(self):
        return {"grid": self.grid, "k": self.k, "residual": self.residual,
                "holdout_residual": self.holdout_residual, "fill": self.fill}


def hull_extract(traj, omega, grid_res=64, holdout_every=10, min_fill=0.9, ridge=1e-12):
    """Least-squares multilinear hull h on the torus grid with x(t) ~ h(phi(t))."""
    k = len(omega)
    if k > 3:
        raise ConfigurationError("hull extraction supports at most 3 frequencies")
    phi = traj.phi
    X = traj.x
    mask = np.ones(phi.shape[0], dtype=bool)
    if holdout_every:
        mask[::holdout_every] = False
    hull = HullFunction(grid=grid_res, k=k, values=np.zeros((grid_res**k, X.shape[1])),
                        residual=math.nan, holdout_residual=math.nan, fill=math.nan,
                        manifold=traj.manifold)
    idx, w = hull._weights(phi[mask])
    n_nodes = grid_res**k
    cells = np.unique(idx[:, 0])
    fill = cells.size / n_nodes
    hull.fill = float(fill)
    if fill < min_fill:
        raise SamplingError(f"phase samples fill {fill:.3f} of the torus grid (< {min_fill}); "
                            "a longer trajectory is needed")
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    A = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(idx.shape[0], n_nodes))
    AtA = (A.T @ A).tocsc()
    reg = ridge * max(1.0, float(AtA.diagonal().max()))
    AtA = AtA + reg * sp.identity(n_nodes, format="csc")
    vals = spsolve(AtA, A.T @ X[mask])
    hull.values = traj.manifold.retract(np.asarray(vals)) if traj.manifold is not None else vals
    fit = np.linalg.norm(hull(phi[mask]) - X[mask], axis=-1)
    hull.residual = float(np.max(fit))
    if (~mask).any():
        hull.holdout_residual = float(np.max(np.linalg.norm(hull(phi[~mask]) - X[~mask], axis=-1)))
    return hull


# ---------------------------------------------------------------------------
# uniqueness

@dataclass
class UniquenessRecord:
    orbit_distance: float
    times: list
    S: list
    S_dot: list
    xi_norms: list
    failures: list
    flags: list

    def summary(self):
        return {"orbit_distance": self.orbit_distance, "times": self.times, "S": self.S,
                "S_dot": self.S_dot, "xi_norms": self.xi_norms, "failures": self.failures,
                "flags": self.flags}


def uniqueness_probe(spec, traj1, traj2, d_bound=np.inf, samples=8, tol=1e-6, dt=1e-3):
    """Orbit distance and the connecting functional S(t) between two bounded solutions."""
    lo = max(traj1.t_span[0], traj2.t_span[0])
    hi = min(traj1.t_span[1], traj2.t_span[1])
    if hi <= lo:
        raise ValueError("trajectories share no common time span")
    sel = (traj1.t >= lo) & (traj1.t <= hi)
    x2, _ = traj2.interp(traj1.t[sel])
    dist = float(np.max(np.linalg.norm(traj1.x[sel] - x2, axis=-1)))
    M, U = spec.manifold, spec.U

    def S_at(t):
        a, va = traj1.interp(t)
        b, vb = traj2.interp(t)
        xi, v1 = connect(M, U, a, b, d_bound)
        return float(np.dot(v1, vb) - np.dot(xi, va)), float(np.linalg.norm(xi))

    times, S, Sd, norms, fails = [], [], [], [], []
    for t in np.linspace(lo + dt, hi - dt, samples):
        try:
            s0, n0 = S_at(t)
            sp_, _ = S_at(t + dt)
            sm, _ = S_at(t - dt)
        except ConvergenceError as exc:
            fails.append({"t": float(t), "error": str(exc)})
            continue
        times.append(float(t))
        S.append(s0)
        Sd.append((sp_ - sm) / (2 * dt))
        norms.append(n0)
    flags = []
    if dist > tol:
        flags.append("distinct bounded solutions")
        if Sd and min(Sd) <= 0:
            flags.append("S_dot not positive at some sample")
    return UniquenessRecord(orbit_distance=dist, times=times, S=S, S_dot=Sd, xi_norms=norms,
                            failures=fails, flags=flags)
