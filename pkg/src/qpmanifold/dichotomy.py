"""Hyperbolicity certificates: the quadratic-form derivative margin and Lyapunov exponents."""
from dataclasses import dataclass, field
import math
from typing import Optional

import numpy as np

from .errors import ConvergenceError
from .dynamics import _check_uniform, liouville_trace, propagate, variational_frame
from .hypotheses import Fields, GridOptions, sigma_verdict


def q_dot_matrices(frame):
    """Symmetric matrices of dQ/dt for Q = <y, z> + |y|^2 <grad U, tau> / 2 at each sample."""
    m = frame.m
    eye = np.eye(m)
    A = frame.A
    symA = 0.5 * (A + np.swapaxes(A, -1, -2))
    top_left = symA + 0.5 * frame.w[:, None, None] * eye
    cross = 0.5 * (frame.Pm + frame.g[:, None, None] * eye)
    top = np.concatenate([top_left, cross], axis=-1)
    bottom = np.concatenate([np.swapaxes(cross, -1, -2),
                             np.broadcast_to(eye, A.shape)], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def q_form_margin(spec, traj, frame=None):
    """(min over samples of the smallest eigenvalue of dQ/dt, time attaining it)."""
    frame = variational_frame(spec, traj) if frame is None else frame
    ev = np.linalg.eigvalsh(q_dot_matrices(frame))[:, 0]
    i = int(np.argmin(ev))
    return float(ev[i]), float(frame.t[i])


@dataclass
class LyapunovResult:
    exponents: np.ndarray  # descending
    times: np.ndarray
    running: np.ndarray  # (chunks, 2m) running estimates
    trace_average: float
    liouville_residual: float
    converged: bool

    def summary(self):
        return {"exponents": self.exponents.tolist(), "trace_average": self.trace_average,
                "liouville_residual": self.liouville_residual, "converged": self.converged}


def lyapunov_exponents(frame, span=None, renorm_dt=1.0, conv_tol=1e-2):
    """Discrete QR method on the reduced variational system."""
    dt = _check_uniform(frame)
    t = frame.t
    i0 = 0 if span is None else int(np.searchsorted(t, span[0] - 1e-9))
    i1 = t.size - 1 if span is None else int(np.searchsorted(t, span[1] + 1e-9)) - 1
    per = int(round(renorm_dt / dt))
    if per < 2 or per % 2:
        raise ValueError("renorm_dt must be an even multiple of the sample spacing")
    chunks = (i1 - i0) // per
    if chunks < 1:
        raise ValueError("span shorter than one renormalization interval")
    n = 2 * frame.m
    Q = np.eye(n)
    logs = np.zeros(n)
    running = np.empty((chunks, n))
    times = np.empty(chunks)
    for c in range(chunks):
        a = i0 + c * per
        Y = propagate(frame, Q, a, a + per)
        Q, R = np.linalg.qr(Y)
        d = np.diag(R)
        sgn = np.where(d < 0, -1.0, 1.0)
        Q = Q * sgn[None, :]
        logs += np.log(np.abs(d))
        elapsed = (c + 1) * per * dt
        running[c] = logs / elapsed
        times[c] = t[a + per]
    iend = i0 + chunks * per
    T = t[iend] - t[i0]
    exps = np.sort(logs / T)[::-1]
    tr_avg = liouville_trace(frame, i0, iend) / T
    q = max(1, chunks // 4)
    drift = np.max(np.abs(np.sort(running[-1])[::-1] - np.sort(running[-q - 1])[::-1])) \
        if chunks > q else math.inf
    return LyapunovResult(exponents=exps, times=times, running=running, trace_average=float(tr_avg),
                          liouville_residual=float(abs(exps.sum() - tr_avg)),
                          converged=bool(drift < conv_tol))


def sigma_along(spec, traj, Z, lp_angles=32):
    """min over trajectory samples of lambda_f + <grad U, f>/2 - sigma(Z)."""
    F = Fields(spec, lp_angles)
    val = F.monotone(traj.phi, traj.x)
    if spec.has_perturbation:
        val = val - F.sigma(traj.phi, traj.x, Z)
    return float(np.min(val))


@dataclass
class DichotomyReport:
    alpha1_estimate: float
    alpha1_time: float
    exponents: list
    gap: tuple
    verdict: bool
    sigma: dict
    sigma_along_trajectory: float
    lyapunov: dict
    Z: float
    gap_tol: float
    counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    running: Optional[np.ndarray] = None
    running_times: Optional[np.ndarray] = None

    def summary(self):
        return {"alpha1_estimate": self.alpha1_estimate, "alpha1_time": self.alpha1_time,
                "exponents": self.exponents, "gap": list(self.gap), "verdict": self.verdict,
                "sigma": self.sigma, "sigma_along_trajectory": self.sigma_along_trajectory,
                "lyapunov": self.lyapunov, "Z": self.Z, "gap_tol": self.gap_tol,
                "counts": self.counts, "flags": self.flags}


def certify(spec, traj, Z=None, gap_tol=0.01, renorm_dt=1.0, opts=None, frame=None, span=None):
    """Conjunction of the sigma condition at Z, a positive dQ/dt margin and an exponent gap."""
    Z = float(np.max(traj.monitors["speed"])) if Z is None else float(Z)
    opts = opts or GridOptions()
    frame = variational_frame(spec, traj) if frame is None else frame
    flags = []
    if frame.orth_defect > spec.tol.transport_tol:
        flags.append(f"frame defect {frame.orth_defect:.3g}; reframed with QR")
        frame = variational_frame(spec, traj, reorth="qr")
        if frame.orth_defect > spec.tol.transport_tol:
            raise ConvergenceError("transported frame degraded beyond transport tolerance",
                                   defect=frame.orth_defect)
    alpha, t_alpha = q_form_margin(spec, traj, frame)
    sig = sigma_verdict(spec, Z, opts)
    sig_traj = sigma_along(spec, traj, Z, opts.lp_angles)
    ly = lyapunov_exponents(frame, span, renorm_dt)
    ex = ly.exponents
    neg, pos = ex[ex < 0], ex[ex > 0]
    gap = (float(neg.max()) if neg.size else -math.inf, float(pos.min()) if pos.size else math.inf)
    band_clear = bool(np.all(np.abs(ex) >= gap_tol))
    if not ly.converged:
        flags.append("exponent traces not settled; widen the span")
    m = frame.m
    split = bool(pos.size == m and neg.size == m)
    verdict = bool(alpha > 0 and band_clear and split and sig.holds)
    return DichotomyReport(alpha1_estimate=alpha, alpha1_time=t_alpha, exponents=ex.tolist(),
                           gap=gap, verdict=verdict, sigma=sig.as_dict(),
                           sigma_along_trajectory=sig_traj, lyapunov=ly.summary(), Z=Z,
                           gap_tol=gap_tol,
                           counts={"positive": int(pos.size), "negative": int(neg.size)},
                           flags=flags, running=ly.running, running_times=ly.times)
