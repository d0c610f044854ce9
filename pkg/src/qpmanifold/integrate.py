"""Batched Dormand-Prince 5(4) stepper with a post-step projection hook.

All rows of the batch share one step size (the worst row controls it), which
keeps the per-step cost a handful of vectorized numpy calls.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import StiffnessError

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# difference between the 5th and embedded 4th order weights (7 stages, FSAL)
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@dataclass
class Solution:
    t: np.ndarray
    y: np.ndarray  # (n_out, batch, dim); rows are nan after their stop time
    stop_t: np.ndarray  # (batch,), nan where no stop occurred
    stats: dict = field(default_factory=dict)


def _initial_step(rhs, t0, y0, f0, rows, rtol, atol):
    sc = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = rhs(t0 + h0, y0 + h0 * f0, rows)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def dopri5(rhs, t0, y0, t1, *, rtol=1e-9, atol=1e-12, h0=None, h_max=np.inf,
           project=None, t_eval=None, stop=None, max_steps=5_000_000):
    """Integrate y' = rhs(t, y, rows) on [t0, t1] for a batch y0 of shape (B, D).

    rhs, project and stop receive the integer indices of the still-active rows so
    that callers can attach per-row data (time offsets, parameters).
    stop(t, y, rows) returns a scalar per row; a row is frozen once it becomes >= 0
    and its crossing time is located by linear interpolation.
    Without t_eval every accepted step is recorded.
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim != 2:
        raise ValueError("y0 must have shape (batch, dim)")
    if t1 < t0:
        raise ValueError("only forward integration is supported")
    nb = y.shape[0]
    rows = np.arange(nb)
    stop_t = np.full(nb, np.nan)
    if project is not None:
        y = project(t0, y, rows)

    if t_eval is None:
        out_t, out_y, record_all = [t0], [y.copy()], True
        targets = np.array([t1])
    else:
        targets = np.asarray(t_eval, dtype=float)
        record_all = False
        out_t = list(targets)
        out_y = np.full((targets.size, nb, y.shape[1]), np.nan)
    next_i = 0
    if not record_all:
        while next_i < targets.size and targets[next_i] <= t0:
            out_y[next_i] = y
            next_i += 1

    g_prev = None
    if stop is not None:
        g_prev = np.asarray(stop(t0, y, rows), dtype=float)
        hit = g_prev >= 0
        if hit.any():
            stop_t[rows[hit]] = t0
            keep = ~hit
            rows, y, g_prev = rows[keep], y[keep], g_prev[keep]

    t = t0
    n_acc = n_rej = 0
    if rows.size == 0 or t1 == t0:
        return _finish(out_t, out_y, record_all, stop_t, n_acc, n_rej)
    k1 = rhs(t, y, rows)
    h = _initial_step(rhs, t, y, k1, rows, rtol, atol) if h0 is None else h0
    h = min(h, h_max)
    h_floor = 1e-14 * max(1.0, abs(t1 - t0))

    while t < t1 and rows.size:
        if n_acc + n_rej > max_steps:
            raise StiffnessError(f"step budget exhausted at t={t:.6g}")
        target = targets[next_i] if not record_all else t1
        h_try = min(h, target - t)
        landing = h_try >= target - t - 1e-15 * max(1.0, abs(t))
        k = [k1]
        for s in range(1, 6):
            ys = y + h_try * sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            k.append(rhs(t + _C[s] * h_try, ys, rows))
        y_new = y + h_try * sum(b * k[j] for j, b in enumerate(_B) if b != 0.0)
        k7 = rhs(t + h_try, y_new, rows)
        k.append(k7)
        err_vec = h_try * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.sqrt(np.mean((err_vec / sc) ** 2, axis=1))))
        if not np.isfinite(err):
            err = np.inf
        if err > 1.0:
            n_rej += 1
            fac = 0.2 if not np.isfinite(err) else max(0.2, 0.9 * err ** -0.2)
            h = h_try * fac
            if h < h_floor:
                raise StiffnessError(f"step size underflow at t={t:.6g} (h={h:.3g})")
            continue

        n_acc += 1
        t_new = target if landing else t + h_try
        if project is not None:
            y_new = project(t_new, y_new, rows)
            k7 = rhs(t_new, y_new, rows)
        if stop is not None:
            g_new = np.asarray(stop(t_new, y_new, rows), dtype=float)
            hit = g_new >= 0
            if hit.any():
                frac = -g_prev[hit] / (g_new[hit] - g_prev[hit])
                stop_t[rows[hit]] = t + np.clip(frac, 0.0, 1.0) * (t_new - t)
        else:
            hit = None
        t, y, k1 = t_new, y_new, k7
        live = slice(None) if hit is None else ~hit
        if record_all:
            snap = np.full((nb, y.shape[1]), np.nan)
            snap[rows[live]] = y[live]
            out_t.append(t)
            out_y.append(snap)
        elif landing:
            out_y[next_i, rows[live]] = y[live]
            next_i += 1
        if hit is not None:
            if hit.any():
                keep = ~hit
                rows, y, k1, g_new = rows[keep], y[keep], k1[keep], g_new[keep]
            g_prev = g_new
        fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h = min(h_max, h_try * fac if not landing else max(h, h_try * fac))
        if not record_all and next_i >= targets.size:
            break
    return _finish(out_t, out_y, record_all, stop_t, n_acc, n_rej)


def _finish(out_t, out_y, record_all, stop_t, n_acc, n_rej):
    t_arr = np.asarray(out_t, dtype=float)
    y_arr = np.stack(out_y) if record_all else out_y
    return Solution(t=t_arr, y=y_arr, stop_t=stop_t,
                    stats={"accepted": n_acc, "rejected": n_rej})


def rk4_step(fun, t, y, h):
    k1 = fun(t, y)
    k2 = fun(t + h / 2, y + h / 2 * k1)
    k3 = fun(t + h / 2, y + h / 2 * k2)
    k4 = fun(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
