"""Integration of the main system, the connecting flow and the variational system."""
from dataclasses import dataclass, field
from functools import cached_property
import csv
import logging
import math
from typing import Optional

import numpy as np

from .errors import ConvergenceError, RangeError, StiffnessError
from .geometry import grad_on_manifold, hess_matrix
from .integrate import dopri5
from .system import wrap

log = logging.getLogger(__name__)

MAX_RAW_GROWTH = 1e12


@dataclass(frozen=True)
class State:
    x: np.ndarray
    v: np.ndarray
    t: float
    phi: np.ndarray

    def phase_at(self, omega, t):
        return wrap(self.phi + (t - self.t) * np.asarray(omega, dtype=float))


def make_state(spec, x, v, t=0.0, phi0=None):
    """State at time t; phi0 is the phase at time 0 (default zero)."""
    x = spec.manifold.retract(np.asarray(x, dtype=float))
    v = spec.manifold.project(x, np.asarray(v, dtype=float))
    base = np.zeros(spec.k) if phi0 is None else np.asarray(phi0, dtype=float)
    return State(x=x, v=v, t=float(t), phi=wrap(base + t * np.asarray(spec.omega)))


@dataclass(frozen=True)
class IntegrationOptions:
    rtol: float = 1e-10
    atol: float = 1e-12
    dt_out: Optional[float] = None
    stop_on_exit: bool = False
    h_max: float = np.inf
    watchdog: bool = True


def _hermite(t0, t1, y0, y1, d0, d1, t):
    h = t1 - t0
    s = ((t - t0) / h)[..., None]
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h[..., None] * d0 + h01 * y1 + h11 * h[..., None] * d1


@dataclass(frozen=True)
class Trajectory:
    """Samples of a solution with monitors; x' = v and v' = a drive the dense output."""
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    phi: np.ndarray
    monitors: dict
    step_meta: dict = field(default_factory=dict)
    exit: Optional[dict] = None
    manifold: object = None

    @property
    def t_span(self):
        return float(self.t[0]), float(self.t[-1])

    def __len__(self):
        return self.t.size

    def state(self, i):
        return State(x=self.x[i], v=self.v[i], t=float(self.t[i]), phi=self.phi[i])

    def interp(self, t):
        """(x, v) at time(s) t by cubic Hermite interpolation, re-projected."""
        tt = np.asarray(t, dtype=float)
        lo, hi = self.t_span
        slack = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(tt < lo - slack) or np.any(tt > hi + slack):
            raise RangeError(f"time outside trajectory span [{lo}, {hi}]")
        i = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, self.t.size - 2)
        t0, t1 = self.t[i], self.t[i + 1]
        x = _hermite(t0, t1, self.x[i], self.x[i + 1], self.v[i], self.v[i + 1], tt)
        v = _hermite(t0, t1, self.v[i], self.v[i + 1], self.a[i], self.a[i + 1], tt)
        if self.manifold is not None:
            x = self.manifold.retract(x)
            v = self.manifold.project(x, v)
        return x, v

    def window(self, t_a, t_b):
        sel = (self.t >= t_a - 1e-12) & (self.t <= t_b + 1e-12)
        return Trajectory(t=self.t[sel], x=self.x[sel], v=self.v[sel], a=self.a[sel],
                          phi=self.phi[sel], monitors={k: v[sel] for k, v in self.monitors.items()},
                          step_meta=dict(self.step_meta), exit=self.exit, manifold=self.manifold)

    def to_csv(self, path):
        k, N = self.phi.shape[1], self.x.shape[1]
        header = (["t"] + [f"phi{i + 1}" for i in range(k)] + [f"x{i + 1}" for i in range(N)]
                  + [f"v{i + 1}" for i in range(N)] + ["speed", "U", "v_U", "G", "residual"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            cols = [self.monitors[c] for c in ("speed", "U", "v_U", "G", "residual")]
            for i in range(self.t.size):
                row = ([self.t[i]] + list(self.phi[i]) + list(self.x[i]) + list(self.v[i])
                       + [c[i] for c in cols])
                w.writerow([format(float(r), ".17g") for r in row])


def monitors_for(spec, x, v):
    M = spec.manifold
    gU = grad_on_manifold(M, spec.U, x)
    return {"speed": np.linalg.norm(v, axis=-1), "U": spec.U(x),
            "v_U": np.einsum("...i,...i->...", gU, v), "G": spec.G(x),
            "residual": np.abs(M.residual(x))}


def build_trajectory(spec, t, x, v, phi, step_meta=None, exit=None):
    a = spec.acceleration(phi, x, v)
    return Trajectory(t=np.asarray(t, dtype=float), x=x, v=v, a=a, phi=phi,
                      monitors=monitors_for(spec, x, v), step_meta=step_meta or {}, exit=exit,
                      manifold=spec.manifold)


# ---------------------------------------------------------------------------
# batched main system

def main_rhs(spec, phase_ref):
    """Right side for rows whose phase at time t is phase_ref[row] + t omega."""
    M = spec.manifold
    N = M.ambient_dim
    om = np.asarray(spec.omega, dtype=float)

    def rhs(t, y, rows):
        x, v = y[:, :N], y[:, N:]
        ph = wrap(phase_ref[rows] + t * om)
        return np.concatenate([v, spec.acceleration(ph, x, v)], axis=1)

    def project(t, y, rows):
        x = M.retract(y[:, :N])
        return np.concatenate([x, M.project(x, y[:, N:])], axis=1)

    return rhs, project


def integrate_batch(spec, t0, X0, V0, t1, phase_ref=None, rtol=1e-10, atol=1e-12,
                    t_eval=None, stop_on_exit=False, h_max=np.inf, max_steps=5_000_000):
    """Integrate many initial states from a common start time t0.

    phase_ref[i] is the phase of row i at time 0 (default zeros); times are absolute.
    """
    X0 = np.atleast_2d(X0)
    V0 = np.atleast_2d(V0)
    B = X0.shape[0]
    if phase_ref is None:
        phase_ref = np.zeros((B, spec.k))
    phase_ref = np.broadcast_to(np.asarray(phase_ref, dtype=float), (B, spec.k))
    rhs, project = main_rhs(spec, phase_ref)
    N = spec.manifold.ambient_dim
    stop = (lambda t, y, rows: spec.G(y[:, :N])) if stop_on_exit else None
    return dopri5(rhs, t0, np.concatenate([X0, V0], axis=1), t1, rtol=rtol, atol=atol,
                  project=project, t_eval=t_eval, stop=stop, h_max=h_max, max_steps=max_steps)


def _watchdog(traj):
    """Linear comparison d|v|/dt <= |f + P v|: flags samples where the speed grows faster."""
    if traj.t.size < 2:
        return 0
    tang = traj.a - traj.manifold.normal(traj.x) * np.einsum(
        "...i,...i->...", traj.a, traj.manifold.normal(traj.x))[..., None]
    rate = np.linalg.norm(tang, axis=-1)
    dt = np.diff(traj.t)
    dv = np.diff(traj.monitors["speed"])
    allowed = dt * np.maximum(rate[1:], rate[:-1]) * 1.05 + 1e-8
    return int(np.sum(dv > allowed))


def integrate_main(spec, init, t_end, opts=None):
    """Integrate from init (a State) to t_end; stops at domain exit when requested."""
    opts = opts or IntegrationOptions()
    om = np.asarray(spec.omega, dtype=float)
    ref = wrap(init.phi - init.t * om)
    t_eval = None
    if opts.dt_out is not None:
        n = int(math.floor((t_end - init.t) / opts.dt_out + 1e-9))
        t_eval = init.t + opts.dt_out * np.arange(n + 1)
        if t_eval[-1] < t_end - 1e-12:
            t_eval = np.append(t_eval, t_end)
    sol = integrate_batch(spec, init.t, init.x[None], init.v[None], t_end, ref[None],
                          rtol=opts.rtol, atol=opts.atol, t_eval=t_eval,
                          stop_on_exit=opts.stop_on_exit, h_max=opts.h_max)
    N = spec.manifold.ambient_dim
    Y = sol.y[:, 0, :]
    ok = np.all(np.isfinite(Y), axis=1)
    t, Y = sol.t[ok], Y[ok]
    exit_rec = None
    if np.isfinite(sol.stop_t[0]):
        exit_rec = {"t": float(sol.stop_t[0]), "x": Y[-1, :N].tolist()}
    phi = wrap(ref[None, :] + t[:, None] * om)
    traj = build_trajectory(spec, t, Y[:, :N], Y[:, N:], phi, dict(sol.stats), exit_rec)
    if opts.watchdog:
        bad = _watchdog(traj)
        traj.step_meta["watchdog_violations"] = bad
        if bad:
            log.warning("velocity watchdog flagged %d samples", bad)
    return traj


# ---------------------------------------------------------------------------
# connecting flow  x'' = (|x'|^2 / 2) grad U - II(x', x') n

def connecting_rhs(M, U):
    N = M.ambient_dim

    def rhs(s, y, rows):
        x, v = y[:, :N], y[:, N:]
        gU = grad_on_manifold(M, U, x)
        acc = 0.5 * np.sum(v * v, axis=1, keepdims=True) * gU + M.constraint_acceleration(x, v)
        return np.concatenate([v, acc], axis=1)

    def project(s, y, rows):
        x = M.retract(y[:, :N])
        return np.concatenate([x, M.project(x, y[:, N:])], axis=1)

    return rhs, project


def connecting_batch(M, U, X0, XI, s_end=1.0, rtol=1e-12, atol=1e-14, s_eval=None):
    rhs, project = connecting_rhs(M, U)
    y0 = np.concatenate([np.atleast_2d(X0), np.atleast_2d(XI)], axis=1)
    return dopri5(rhs, 0.0, y0, s_end, rtol=rtol, atol=atol, project=project,
                  t_eval=[s_end] if s_eval is None else s_eval)


@dataclass(frozen=True)
class ConnectingPath:
    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    conserved: np.ndarray

    @property
    def drift(self):
        return float(np.max(np.abs(self.conserved - self.conserved[0])))


def integrate_connecting(M, U, x0, xi, s_end=1.0, rtol=1e-10, atol=1e-13):
    """Path of the connecting flow with the monitor |x'|^2 exp(-U(x))."""
    x0 = np.asarray(x0, dtype=float)
    xi = M.project(x0, np.asarray(xi, dtype=float))
    rhs, project = connecting_rhs(M, U)
    sol = dopri5(rhs, 0.0, np.concatenate([x0, xi])[None], s_end, rtol=rtol, atol=atol,
                 project=project)
    N = M.ambient_dim
    Y = sol.y[:, 0, :]
    x, v = Y[:, :N], Y[:, N:]
    cons = np.sum(v * v, axis=1) * np.exp(-U(x))
    return ConnectingPath(s=sol.t, x=x, v=v, conserved=cons)


def _initial_guess(M, x0, x1):
    d = M.project(x0, x1 - x0)
    nd = np.linalg.norm(d)
    if nd == 0:
        return d
    if M.kind == "unit_sphere":
        ang = math.atan2(np.linalg.norm(np.cross(x0, x1)) if x0.size == 3 else nd,
                         float(np.dot(x0, x1)))
        return d * (ang / nd)
    return d


def connect(M, U, x0, x1, d_bound=np.inf, root_tol=1e-12, max_iter=40, rtol=1e-12):
    """Shooting Newton for xi with x(1, xi) = x1; returns (xi, x'(1))."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    N = M.ambient_dim
    if np.linalg.norm(x1 - x0) <= root_tol:
        return np.zeros(N), np.zeros(N)
    B0 = M.tangent_basis(x0)
    B1 = M.tangent_basis(x1)
    m = B0.shape[1]

    def shoot(C):
        XI = C @ B0.T
        sol = connecting_batch(M, U, np.broadcast_to(x0, XI.shape), XI, rtol=rtol)
        return sol.y[-1][:, :N], sol.y[-1][:, N:]

    def solve_from(c, target, B_t):
        for it in range(max_iter):
            h = 1e-7 * max(1.0, np.linalg.norm(c))
            C = np.vstack([c, c + h * np.eye(m)])
            X, V = shoot(C)
            r = B_t.T @ (X[0] - target)
            err = np.linalg.norm(X[0] - target)
            if err <= root_tol:
                return c, V[0], err
            J = (B_t.T @ (X[1:] - X[0]).T) / h
            try:
                dc = -np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                return c, V[0], err
            lam = 1.0
            while lam > 1e-4:
                Xt, _ = shoot((c + lam * dc)[None])
                if np.linalg.norm(Xt[0] - target) < err:
                    break
                lam *= 0.5
            c = c + lam * dc
        X, V = shoot(c[None])
        return c, V[0], np.linalg.norm(X[0] - target)

    c0 = B0.T @ _initial_guess(M, x0, x1)
    c, v1, err = solve_from(c0, x1, B1)
    if err > root_tol:
        # continuation along a coarse path from x0 to x1
        c = np.zeros(m)
        for lam in np.linspace(0.1, 1.0, 10):
            tgt = M.retract(x0 + lam * (x1 - x0))
            c, v1, err = solve_from(c, tgt, M.tangent_basis(tgt))
        if err > root_tol:
            raise ConvergenceError("connecting map did not converge", residual=float(err),
                                   x0=x0.tolist(), x1=x1.tolist())
    xi = B0 @ c
    if np.linalg.norm(xi) > d_bound + root_tol:
        log.warning("connecting vector norm %.6g exceeds the bound %.6g",
                    np.linalg.norm(xi), d_bound)
    return xi, v1


def connecting_map(M, U, x0, x1, d_bound=np.inf, root_tol=1e-12):
    return connect(M, U, x0, x1, d_bound, root_tol)[0]


# ---------------------------------------------------------------------------
# variational system in a parallel frame

@dataclass(frozen=True)
class VariationalFrame:
    """Transported orthonormal frame and the reduced operators A(t), P(t)."""
    t: np.ndarray
    basis: np.ndarray  # (n, N, m)
    A: np.ndarray  # (n, m, m)
    Pm: np.ndarray  # (n, m, m)
    tau: np.ndarray  # (n, m) velocity in frame coordinates
    g: np.ndarray  # <grad U, tau>
    w: np.ndarray  # d/dt <grad U, tau>
    orth_defect: float

    @property
    def m(self):
        return self.A.shape[-1]

    @cached_property
    def _system(self):
        return self._assemble(self.A, self.Pm)

    def system_matrix(self, i=None):
        return self._system if i is None else self._system[i]

    def _assemble(self, A, Pm):
        m = self.m
        top = np.concatenate([np.zeros(A.shape[:-2] + (m, m)),
                              np.broadcast_to(np.eye(m), A.shape[:-2] + (m, m))], axis=-1)
        return np.concatenate([top, np.concatenate([A, Pm], axis=-1)], axis=-2)


def transport_frame(M, traj, frame0=None, reorth="polar"):
    """Parallel frame at every sample by RK4 on the transport equation.

    Stage midpoints come from the Hermite dense output; columns are re-projected
    and re-orthonormalized (one polar Newton-Schulz step, or QR when reorth="qr").
    """
    n = traj.t.size
    E = M.tangent_basis(traj.x[0]) if frame0 is None else np.asarray(frame0, dtype=float)
    mid_t = 0.5 * (traj.t[1:] + traj.t[:-1])
    xm, vm = traj.interp(mid_t)
    nrm = M.normal(traj.x)
    nrm_m = M.normal(xm)
    out = np.empty((n,) + E.shape)
    out[0] = E
    W = E.T.copy()

    def f_at(x, v, nr, W):
        return -M.second_form(x[None], W, v[None])[:, None] * nr[None, :]

    for i in range(n - 1):
        h = traj.t[i + 1] - traj.t[i]
        k1 = f_at(traj.x[i], traj.v[i], nrm[i], W)
        k2 = f_at(xm[i], vm[i], nrm_m[i], W + 0.5 * h * k1)
        k3 = f_at(xm[i], vm[i], nrm_m[i], W + 0.5 * h * k2)
        k4 = f_at(traj.x[i + 1], traj.v[i + 1], nrm[i + 1], W + h * k3)
        W = W + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        W = M.project(traj.x[i + 1][None], W)
        if reorth == "qr":
            q, r = np.linalg.qr(W.T)
            W = (q * np.sign(np.diag(r))[None, :]).T
        elif reorth == "polar":
            W = (1.5 * np.eye(W.shape[0]) - 0.5 * W @ W.T) @ W
        out[i + 1] = W.T
    return out


def variational_frame(spec, traj, frame0=None, reorth="polar"):
    M = spec.manifold
    Theta = transport_frame(M, traj, frame0, reorth)
    n, N, m = Theta.shape
    x, v, phi = traj.x, traj.v, traj.phi
    ThT = np.swapaxes(Theta, 1, 2)
    cols_f, cols_R, cols_P, cols_Pz = [], [], [], []
    for j in range(m):
        e = Theta[:, :, j]
        cols_f.append(spec.cov_f(phi, x, e))
        cols_R.append(M.curvature_term(x, e, v))
        cols_P.append(spec.cov_P(phi, x, e, v))
        cols_Pz.append(spec.P(phi, x, e))
    stack = lambda c: ThT @ np.stack(c, axis=-1)
    A = stack(cols_f) - stack(cols_R) + stack(cols_P)
    Pm = stack(cols_Pz)
    tau = np.einsum("nim,ni->nm", Theta, v)
    gU = grad_on_manifold(M, spec.U, x)
    g = np.einsum("ni,ni->n", gU, v)
    HU = hess_matrix(M, spec.U, x)
    acc_t = spec.f(phi, x) + spec.P(phi, x, v)
    w = np.einsum("ni,nij,nj->n", v, HU, v) + np.einsum("ni,ni->n", gU, acc_t)
    eye = np.eye(m)
    defect = float(np.max(np.abs(ThT @ Theta - eye)))
    return VariationalFrame(t=traj.t.copy(), basis=Theta, A=A, Pm=Pm, tau=tau, g=g, w=w,
                            orth_defect=defect)


def _predicted_growth(frame, i0, i1):
    S = frame.system_matrix()
    norms = np.linalg.norm(S[i0:i1 + 1], ord=2, axis=(-2, -1))
    dt = np.diff(frame.t[i0:i1 + 1])
    return float(np.sum(0.5 * (norms[1:] + norms[:-1]) * dt))


def _check_uniform(frame):
    dt = np.diff(frame.t)
    if dt.size == 0 or np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(dt[0])):
        raise ValueError("variational integration needs uniformly spaced samples")
    return float(dt[0])


def propagate(frame, Y, i0, i1):
    """RK4 with step 2 dt between samples i0 and i1 (i1 - i0 even); midpoints on samples."""
    S = frame.system_matrix()
    dt = _check_uniform(frame)
    for i in range(i0, i1, 2):
        k1 = S[i] @ Y
        k2 = S[i + 1] @ (Y + dt * k1)
        k3 = S[i + 1] @ (Y + dt * k2)
        k4 = S[i + 2] @ (Y + 2 * dt * k3)
        Y = Y + (2 * dt) / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y


def integrate_variational(frame, Y0, i0=0, i1=None):
    """Fundamental matrix at every second sample; refuses spans the raw integration would overflow."""
    i1 = frame.t.size - 1 if i1 is None else i1
    i1 -= (i1 - i0) % 2
    growth = _predicted_growth(frame, i0, i1)
    if growth > math.log(MAX_RAW_GROWTH):
        raise StiffnessError(f"predicted growth exp({growth:.1f}) exceeds the raw integration "
                             "limit; use the renormalized exponent computation")
    Y = np.asarray(Y0, dtype=float)
    out = [Y]
    for i in range(i0, i1, 2):
        Y = propagate(frame, Y, i, i + 2)
        out.append(Y)
    return frame.t[i0:i1 + 1:2], np.stack(out)


def liouville_trace(frame, i0, i1):
    """Integral of trace of the system matrix (equals the trace of P in the frame)."""
    tr = np.trace(frame.Pm[i0:i1 + 1], axis1=-2, axis2=-1)
    return float(np.trapezoid(tr, frame.t[i0:i1 + 1]))
