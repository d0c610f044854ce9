"""Scalar constants and one-dimensional root problems behind the a priori bounds."""
import math
from dataclasses import dataclass, field

from .errors import ConvergenceError, DomainError

L_SWITCH = 1e-8


def safeguarded_newton(fun, dfun, lo, hi, xtol=1e-15, ftol=0.0, max_iter=200):
    """Root of fun on [lo, hi] (sign change required); Newton steps, bisection fallback."""
    flo, fhi = fun(lo), fun(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ConvergenceError("root not bracketed", lo=lo, hi=hi, flo=flo, fhi=fhi)
    if flo > 0:
        lo, hi = hi, lo
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = fun(x)
        if abs(fx) <= ftol:
            return x
        if fx < 0:
            lo = x
        else:
            hi = x
        d = dfun(x)
        step_ok = d != 0 and math.isfinite(d)
        x_new = x - fx / d if step_ok else None
        if x_new is None or not (min(lo, hi) < x_new < max(lo, hi)):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= xtol * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


def zeta_star(m):
    """Greatest real root of z^3 - 3 z + 2 - 3 m (m >= 0)."""
    if m < 0:
        raise DomainError(f"zeta_star needs m >= 0, got {m}")
    if m == 0:
        return 1.0
    hi = 1.0 + (3.0 * m) ** (1.0 / 3.0) + 2.0
    return safeguarded_newton(lambda z: z**3 - 3 * z + 2 - 3 * m, lambda z: 3 * z**2 - 3, 1.0, hi)


def z_pm(p, q):
    """Roots (z_plus, z_minus) of z^2 - p z - q^2."""
    if p < 0 or q < 0:
        raise DomainError("z_pm needs p, q >= 0")
    zp = 0.5 * (p + math.sqrt(4 * q * q + p * p))
    zm = -q * q / zp if zp > 0 else 0.0
    return zp, zm


def _shifted_moments(delta, L, nmax=60):
    """(int_0^delta t^2/(1+Lt) dt, int_0^delta t/(1+Lt) dt) without cancellation."""
    y = L * delta
    if y < 0.5:
        m2 = m1 = 0.0
        term = 1.0
        for j in range(nmax):
            m2 += term * delta ** (j + 3) / (j + 3)
            m1 += term * delta ** (j + 2) / (j + 2)
            term *= -L
            if abs(term) * delta ** (j + 3) < 1e-18 * max(m2, 1e-300):
                break
        return m2, m1
    lg = math.log1p(y)
    return (0.5 * y * y - y + lg) / L**3, (y - lg) / L**2


def barrier_I(z, p, q, l):
    """I(z) = int_{z_+}^{z} (w^2 - p w - q^2)/(l w + 1) dw.

    Evaluated in the shift t = w - z_+, where the integrand is t (t + z_+ - z_-)/(1 + l z_+ + l t):
    for l > L_SWITCH this is the logarithmic closed form, below it the l-series.
    """
    if l < 0:
        raise DomainError("barrier_I needs l >= 0")
    if 1 + l * z <= 0:
        raise DomainError("barrier_I needs 1 + l z > 0")
    zp, zm = z_pm(p, q)
    delta = z - zp
    if delta < 0:
        raise DomainError(f"barrier_I needs z >= z_plus = {zp}")
    D = zp - zm
    a = 1.0 + l * zp
    if l <= L_SWITCH:
        # 1/(a + l t) = (1/a) sum (-l t / a)^j, truncated far below roundoff
        L = l / a
        total, term = 0.0, 1.0 / a
        for j in range(6):
            total += term * (delta ** (j + 3) / (j + 3) + D * delta ** (j + 2) / (j + 2))
            term *= -L
        return total
    m2, m1 = _shifted_moments(delta, l / a)
    return (m2 + D * m1) / a


def barrier_I_bracket(z, p, q, l):
    """Textbook antiderivative form, kept as a cross-check for moderate l."""
    def F(w):
        return (0.5 * w * w - (1 + p * l) / l * w
                + (1 + p * l - q * q * l * l) / (l * l) * math.log(1 + l * w)) / l
    zp, _ = z_pm(p, q)
    return F(z) - F(zp)


def barrier_I_limit(z, q):
    """l -> 0, p = 0 limit z^3/3 - q^2 z + 2 q^3 / 3."""
    return z**3 / 3 - q * q * z + 2 * q**3 / 3


def explicit_z_star_bound(C_f, C_U, p, q, l):
    """Explicit upper bound for z_star, valid when l < z_plus / q^2; None otherwise."""
    zp, _ = z_pm(p, q)
    if q <= 0 or not l < zp / (q * q):
        return None
    return zp + (1 + l * zp) * math.sqrt(C_f * C_U * zp / q)


def z_star(C_f, C_U, p, q, l, root_tol=1e-13):
    """Root z_star >= z_plus of I(z) = C_f C_U z_plus."""
    for name, val in (("C_f", C_f), ("C_U", C_U), ("p", p), ("q", q), ("l", l)):
        if val < 0:
            raise DomainError(f"z_star needs {name} >= 0")
    cc = C_f * C_U
    if q == 0 and p == 0 and cc > 0:
        raise DomainError("degenerate barrier: q = p = 0 with C_f C_U > 0")
    zp, _ = z_pm(p, q)
    target = cc * zp
    if target == 0:
        return zp
    rb = explicit_z_star_bound(C_f, C_U, p, q, l)
    width = (rb - zp if rb is not None else 0.0) + 1.0
    hi = zp + width
    while barrier_I(hi, p, q, l) < target:
        width *= 2
        hi = zp + width
        if width > 1e300:
            raise ConvergenceError("z_star bracket expansion failed")

    def g(z):
        return barrier_I(z, p, q, l) - target

    def dg(z):
        return (z * z - p * z - q * q) / (1 + l * z)

    return safeguarded_newton(g, dg, zp, hi, xtol=1e-16, ftol=root_tol * target)


def q_from_product(C_f, C_U):
    """Alternative admissible choice q = sqrt(C_f C_U)."""
    return math.sqrt(C_f * C_U)


def sigma_threshold(M_U, M_P, M_PU, L_P, Z):
    return (M_U * M_P + M_PU + 2 * L_P) * Z / 2 + M_P**2 / 4


def connecting_bound_d(C_U, l_U, U_min, U_max):
    """Bound d on the initial velocity of a connecting curve inside the domain."""
    if l_U <= 0:
        raise DomainError("connecting_bound_d needs l_U > 0")
    if U_max < U_min:
        raise DomainError("connecting_bound_d needs U_max >= U_min")
    gap = U_max - U_min
    e = math.exp(gap)
    return (C_U * e + math.sqrt((C_U * e) ** 2 + 2 * l_U * e * gap)) / l_U


@dataclass
class ConstantsReport:
    C_f: float
    C_U: float
    q: float
    p: float
    l: float
    l_U: float
    z_plus: float
    z_minus: float
    z_star: float
    d: float
    U_star_min: float
    U_star_max: float
    witnesses: dict = field(default_factory=dict)
    grid_meta: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def check_invariants(self):
        ok = (self.z_minus <= 0 <= self.z_plus and self.z_star >= self.z_plus
              and self.C_f >= 0 and self.C_U >= 0 and self.U_star_min <= self.U_star_max)
        return ok

    def scalars(self):
        return {k: float(getattr(self, k)) for k in (
            "C_f", "C_U", "q", "p", "l", "l_U", "z_plus", "z_minus", "z_star", "d",
            "U_star_min", "U_star_max")}


def assemble_constants(C_f, C_U, q2_max, p, l, l_U, U_min, U_max, witnesses=None,
                       grid_meta=None, q_mode="default"):
    """Derived constants (z_pm, z_star, d) from the extremal values."""
    flags = []
    if q2_max <= 0:
        q = 0.0
        flags.append("q_nonpositive: only constant candidates")
    else:
        q = math.sqrt(q2_max)
    if q_mode == "product":
        q = q_from_product(C_f, C_U)
        flags.append("q_mode=product")
    zp, zm = z_pm(p, q)
    try:
        zs = z_star(C_f, C_U, p, q, l)
    except DomainError as exc:
        zs = math.nan
        flags.append(f"z_star unavailable: {exc}")
    d = connecting_bound_d(C_U, l_U, U_min, U_max) if l_U > 0 else math.nan
    return ConstantsReport(C_f=C_f, C_U=C_U, q=q, p=p, l=l, l_U=l_U, z_plus=zp,
                           z_minus=zm, z_star=zs, d=d, U_star_min=U_min, U_star_max=U_max,
                           witnesses=witnesses or {}, grid_meta=grid_meta or {}, flags=flags)
