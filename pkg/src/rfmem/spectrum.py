"""Spectral density of the Gram matrix ``U`` from its Stieltjes transform.

The resolvent traces ``q``, ``r``, ``s`` solve a closed system of three
equations parametrized by the activation constants, the data spectrum and
the ratios ``psi_p = p/d``, ``psi_n = n/d``.  ``s`` is explicit in
``(q, r)``, so the solver runs a complex Newton iteration on the remaining
two unknowns, continued down in ``Im z`` from far off the real axis.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.integrate import trapezoid

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan"), z=None):
        super().__init__(message)
        self.residual = residual
        self.z = z


@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 10_000
    damping: float = 0.5
    newton_iter: int = 60


@dataclass
class StieltjesSolution:
    z: complex
    q: complex
    r: complex
    s: complex
    residual: float
    iterations: int


@dataclass
class DensityCurve:
    """Density on a grid.  ``rho`` counts toward the total spectral mass
    (a bulk of weight ``1/psi_p`` integrates to ``1/psi_p``)."""

    lambda_grid: np.ndarray
    rho: np.ndarray
    epsilon_used: float
    delta_location: float = float("nan")
    delta_weight: float = 0.0
    spike: np.ndarray = None
    failed: np.ndarray = None

    def __post_init__(self):
        n = len(self.lambda_grid)
        if self.spike is None:
            self.spike = np.zeros(n, dtype=bool)
        if self.failed is None:
            self.failed = np.zeros(n, dtype=bool)

    def _usable(self):
        return ~(self.spike | self.failed)

    def mass(self, lo=-np.inf, hi=np.inf):
        lam, rho = self.lambda_grid, np.where(self._usable(), self.rho, 0.0)
        sel = (lam >= lo) & (lam <= hi)
        return float(trapezoid(rho[sel], lam[sel]))

    def moment(self, k, lo=-np.inf, hi=np.inf, include_delta=False):
        lam, rho = self.lambda_grid, np.where(self._usable(), self.rho, 0.0)
        sel = (lam >= lo) & (lam <= hi)
        val = float(trapezoid(rho[sel] * lam[sel] ** k, lam[sel]))
        if include_delta:
            val += self.delta_weight * self.delta_location**k
        return val

    def supports(self, rel_threshold=1e-3):
        """Connected intervals where ``lambda * rho`` exceeds ``rel_threshold``
        times its maximum, with their masses.

        Weighting by ``lambda`` keeps bulks of very different scale (and hence
        very different peak density) on the same footing.
        """
        rho = np.where(self._usable(), self.rho, 0.0)
        dens = np.abs(self.lambda_grid) * rho
        if dens.max() <= 0:
            return []
        above = dens > rel_threshold * dens.max()
        lam = self.lambda_grid
        out = []
        i = 0
        while i < len(lam):
            if above[i]:
                j = i
                while j + 1 < len(lam) and above[j + 1]:
                    j += 1
                lo = lam[max(i - 1, 0)] if i > 0 else lam[i]
                hi = lam[min(j + 1, len(lam) - 1)]
                out.append(Support(lam[i], lam[j], self.mass(lo, hi), float(lam[i] - lo)))
                i = j + 1
            else:
                i += 1
        return out


@dataclass(frozen=True)
class Support:
    lower: float
    upper: float
    mass: float
    resolution: float


@dataclass
class SpectrumSummary:
    delta_location: float
    delta_weight: float
    bulk1_edges: tuple
    bulk2_edges: tuple
    tau_gen: float
    tau_mem: float
    regime: str
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "delta_location": self.delta_location,
            "delta_weight": self.delta_weight,
            "bulk1_edges": list(self.bulk1_edges),
            "bulk2_edges": list(self.bulk2_edges),
            "tau_gen": self.tau_gen,
            "tau_mem": self.tau_mem,
            "regime": self.regime,
        }
        out.update(self.extra)
        return out


# ---------------------------------------------------------------------------
# full three-equation system


class _System:
    """Vectorized residual and Jacobian of the (q, r) system at fixed z."""

    def __init__(self, measure, constants, psi_p, psi_n):
        c = constants
        self.lam = measure.eigenvalues[:, None]
        self.w = measure.weights[:, None]
        self.psi_p = float(psi_p)
        self.e2a2 = c.a_t**2 * c.decay
        self.b2 = c.b_t**2
        self.v2 = max(c.v_t2, 0.0)
        self.s2 = c.s_t2
        self.alpha = self.e2a2 * psi_p / psi_n
        self.beta = psi_p * self.v2 / psi_n

    def evaluate(self, z, q, r, jacobian=True):
        P = self.psi_p
        D = 1.0 + self.alpha * r + self.beta * q
        rhat = P * self.e2a2 / D
        shat = self.b2 * P + 1.0 / q
        den = shat + self.lam * rhat
        inv = 1.0 / den
        s = (self.w * inv).sum(0)
        rint = (self.w * self.lam * inv).sum(0)
        F1 = r - rint
        H = P * (self.s2 - z) * q**2 + P * self.v2 * q**2 / D + (1.0 - P) * q - s
        scale1 = np.abs(r) + np.abs(rint) + 1e-300
        scale2 = (
            np.abs(P * (self.s2 - z) * q**2)
            + np.abs(P * self.v2 * q**2 / D)
            + np.abs((1.0 - P) * q)
            + np.abs(s)
            + 1e-300
        )
        res = np.maximum(np.abs(F1) / scale1, np.abs(H) / scale2)
        if not jacobian:
            return F1, H, s, res, None
        dshat_dq = -1.0 / q**2
        drhat_dq = -rhat * self.beta / D
        drhat_dr = -rhat * self.alpha / D
        inv2 = inv**2
        ds_dq = -(self.w * (dshat_dq + self.lam * drhat_dq) * inv2).sum(0)
        ds_dr = -(self.w * self.lam * drhat_dr * inv2).sum(0)
        dri_dq = -(self.w * self.lam * (dshat_dq + self.lam * drhat_dq) * inv2).sum(0)
        dri_dr = -(self.w * self.lam**2 * drhat_dr * inv2).sum(0)
        J = (
            -dri_dq,
            1.0 - dri_dr,
            2.0 * P * (self.s2 - z) * q
            + P * self.v2 * (2.0 * q / D - q**2 * self.beta / D**2)
            + (1.0 - P)
            - ds_dq,
            -P * self.v2 * q**2 * self.alpha / D**2 - ds_dr,
        )
        return F1, H, s, res, J


def _herglotz_ok(z, q, r, s):
    """Sign constraints of resolvent traces for Im z > 0."""
    tol = 1e-12 * (np.abs(q) + 1.0)
    return (q.imag > -tol) & (r.imag > -tol * (np.abs(r) + 1)) & (s.imag > -tol * (np.abs(s) + 1))


def _newton(sys, z, q, r, opts, active=None):
    """Damped Newton on all points in parallel; returns (q, r, s, res, iters, ok)."""
    z = np.asarray(z, dtype=complex)
    q = np.array(q, dtype=complex)
    r = np.array(r, dtype=complex)
    n = z.size
    iters = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool) if active is None else ~active
    res = np.full(n, np.inf)
    s = np.zeros(n, dtype=complex)
    for _ in range(opts.newton_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        zi, qi, ri = z[idx], q[idx], r[idx]
        F1, H, si, resi, J = sys.evaluate(zi, qi, ri)
        res[idx] = resi
        s[idx] = si
        conv = resi < opts.tol
        done[idx[conv]] = True
        idx, zi, qi, ri, F1, H, resi = (a[~conv] for a in (idx, zi, qi, ri, F1, H, resi))
        J = [j[~conv] for j in J]
        if idx.size == 0:
            break
        a11, a12, a21, a22 = J[0], J[1], J[2], J[3]
        det = a11 * a22 - a12 * a21
        bad = np.abs(det) == 0
        det = np.where(bad, 1.0, det)
        dq = (a22 * F1 - a12 * H) / det
        dr = (-a21 * F1 + a11 * H) / det
        # backtracking: accept the largest step halving that lowers the residual
        # and keeps q in the upper half plane
        step = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        new_q, new_r = qi.copy(), ri.copy()
        for _ in range(12):
            cand_q = qi - step * dq
            cand_r = ri - step * dr
            _, _, cs, cres, _ = sys.evaluate(zi, cand_q, cand_r, jacobian=False)
            good = (~accepted) & (cres < np.maximum(resi, 1e-300) * (1 - 1e-4 * step) + 1e-300)
            good &= np.isfinite(cres) & (cand_q.imag > 0)
            new_q[good], new_r[good] = cand_q[good], cand_r[good]
            accepted |= good
            if accepted.all():
                break
            step = np.where(accepted, step, step * 0.5)
        stuck = ~accepted
        q[idx], r[idx] = new_q, new_r
        iters[idx] += 1
        done[idx[stuck]] = True
    F1, H, s, res, _ = sys.evaluate(z, q, r, jacobian=False)
    ok = (res < opts.tol) & _herglotz_ok(z, q, r, s)
    return q, r, s, res, iters, ok


def _initial(z, measure):
    """Large-|z| expansion: q ~ -1/z, r ~ -E[lambda]/z."""
    m1 = float(measure.weights @ measure.eigenvalues)
    return -1.0 / z, -m1 / z


def _continuation(sys, lam, eps, measure, opts, y_start, factor=0.6, q0=None, r0=None):
    """Track the physical branch from Im z = y_start down to ``eps`` for an
    array of real parts, refining the Im z steps wherever Newton fails."""
    lam = np.asarray(lam, dtype=float)
    n = lam.size
    y = np.full(n, float(y_start))
    if q0 is None:
        q, r = _initial(lam + 1j * y, measure)
    else:
        q, r = np.array(q0, dtype=complex), np.array(r0, dtype=complex)
    q, r, s, res, iters, ok = _newton(sys, lam + 1j * y, q, r, opts)
    if not ok.all():
        # far from the axis the plain fixed point is contractive; use it to seed
        for k in np.flatnonzero(~ok):
            sol = _damped_fixed_point(sys, complex(lam[k], y[k]), measure, opts)
            q[k], r[k], s[k], res[k] = sol
        ok = np.isfinite(res) & (res < opts.tol)
    fac = np.full(n, factor)
    total_iters = iters.copy()
    failed = ~ok
    target = float(eps)
    guard = 0
    while True:
        active = (~failed) & (y > target * (1 + 1e-12))
        if not active.any():
            break
        guard += 1
        if guard > 2000:
            failed |= active
            break
        y_new = np.where(active, np.maximum(y * fac, target), y)
        qn, rn, sn, resn, it, okn = _newton(sys, lam + 1j * y_new, q, r, opts, active=active)
        total_iters += it
        # sanity on jumps: the physical branch moves continuously in y
        jump = np.abs(qn - q) > 0.5 * (np.abs(q) + np.abs(qn)) * (1 - fac + 0.05) + 1e-300
        good = active & okn & ~(jump & (fac < 0.95))
        q[good], r[good], s[good], res[good] = qn[good], rn[good], sn[good], resn[good]
        y[good] = y_new[good]
        fac[good] = np.minimum(fac[good] ** 0.8, factor)
        bad = active & ~good
        fac[bad] = 1 - (1 - fac[bad]) * 0.5
        failed |= bad & (fac > 1 - 1e-6)
    return q, r, s, res, total_iters, failed


def _damped_fixed_point(sys, z, measure, opts):
    """Plain damped iteration; slow but robust far from the real axis."""
    q, r = _initial(np.array([z]), measure)
    theta = opts.damping
    last = np.inf
    for it in range(opts.max_iter):
        F1, H, s, res, J = sys.evaluate(np.array([z]), q, r)
        if res[0] < opts.tol:
            return q[0], r[0], s[0], res[0]
        P = sys.psi_p
        D = 1.0 + sys.alpha * r + sys.beta * q
        rhat = P * sys.e2a2 / D
        shat = sys.b2 * P + 1.0 / q
        den = shat + sys.lam * rhat
        r_new = (sys.w * sys.lam / den).sum(0)
        # third equation solved for 1/q given s: quadratic form rearranged
        c0 = P * (sys.s2 - z) + P * sys.v2 / D
        # third equation divided by q: q = (s / q - (1 - P)) / c0
        q_new = (-(1.0 - P) + s / q) / c0
        q_new = np.where(q_new.imag > 0, q_new, q_new.conj())
        if res[0] > last:
            theta = max(theta * 0.5, 1e-3)
        last = res[0]
        q = (1 - theta) * q + theta * q_new
        r = (1 - theta) * r + theta * r_new
    F1, H, s, res, _ = sys.evaluate(np.array([z]), q, r, jacobian=False)
    return q[0], r[0], s[0], res[0]


def solve_stieltjes(z, measure, constants, psi_p, psi_n, opts=None, warm=None):
    """Resolvent traces (q, r, s) at a point ``z`` of the upper half plane.

    ``warm`` is an optional ``(q, r)`` guess, typically the solution at a
    neighbouring grid point.  Without it (or when it fails) the branch is
    tracked by continuation from ``Im z = max(10, 2|z|)``.
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError("solve_stieltjes requires Im z > 0")
    opts = opts or SolverOptions()
    sys = _System(measure, constants, psi_p, psi_n)
    zz = np.array([z])
    if warm is not None:
        q, r, s, res, it, ok = _newton(sys, zz, np.array([warm[0]]), np.array([warm[1]]), opts)
        if ok[0]:
            return StieltjesSolution(z, complex(q[0]), complex(r[0]), complex(s[0]), float(res[0]), int(it[0]))
        logger.debug("warm start failed at z=%s (res=%.2e); restarting", z, res[0])
    y0 = max(10.0, 2.0 * abs(z))
    if y0 <= z.imag:
        q, r = _initial(zz, measure)
        q, r, s, res, it, ok = _newton(sys, zz, q, r, opts)
        failed = ~ok
    else:
        q, r, s, res, it, failed = _continuation(sys, zz.real, z.imag, measure, opts, y0)
    if failed[0] or not res[0] < opts.tol:
        raise ConvergenceError(f"Stieltjes system did not converge at z={z}", float(res[0]), z)
    return StieltjesSolution(z, complex(q[0]), complex(r[0]), complex(s[0]), float(res[0]), int(it[0]))


def density_at(lam, measure, constants, psi_p, psi_n, eps=1e-6, opts=None):
    """Continuous density at a few points, tracked down to a small ``eps``."""
    opts = opts or SolverOptions()
    sys = _System(measure, constants, psi_p, psi_n)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    scale = max(10.0, 2.0 * float(np.max(np.abs(lam))))
    q, r, s, res, it, failed = _continuation(sys, lam, eps, measure, opts, y_start=scale)
    if failed.any():
        raise ConvergenceError("density evaluation failed", float(np.max(res)), lam[failed])
    f = delta_weight(psi_p, psi_n)
    return q.imag / math.pi - f * eps / math.pi / ((lam - constants.s_t2) ** 2 + eps**2)


def refine_edges(curve, support, measure, constants, psi_p, psi_n, rel_threshold=1e-3,
                 eps=1e-6, n_bisect=25, opts=None):
    """Sharpen the edges of a detected support by bisection at a smaller ``eps``.

    The broadening at ``curve.epsilon_used`` leaves Lorentzian tails that can
    sit above the detection threshold next to dense bulks.  Each edge is
    bracketed between a point outside the bulk and a point well inside, and
    the crossing of ``lambda * rho`` through the threshold is located.
    """
    usable = curve._usable()
    level = rel_threshold * np.max(np.where(usable, np.abs(curve.lambda_grid) * curve.rho, 0.0))
    width = support.upper - support.lower

    def above(x):
        return abs(x) * density_at(x, measure, constants, psi_p, psi_n, eps, opts)[0] > level

    def bisect(outside, inside):
        if above(outside):
            return outside
        for _ in range(n_bisect):
            mid = 0.5 * (outside + inside)
            if above(mid):
                inside = mid
            else:
                outside = mid
        return 0.5 * (outside + inside)

    lo = bisect(support.lower - support.resolution, support.lower + 0.25 * width)
    hi = bisect(support.upper + support.resolution, support.upper - 0.25 * width)
    return Support(lo, hi, support.mass, width * 0.5 ** n_bisect)


def classify_supports(supports):
    """Split detected supports into ``(minor, bulk1, bulk2)``.

    Bulk 2 is everything above the widest gap (measured in log-lambda), and is
    returned as the hull of its pieces; bulk 1 is the heaviest component
    below it.  Remaining small components are returned in ``minor``.
    """
    sup = sorted(supports, key=lambda s: s.lower)
    if len(sup) < 2:
        raise ValueError("need at least two supports to separate the bulks")
    gaps = [math.log(max(b.lower, 1e-300)) - math.log(max(a.upper, 1e-300)) for a, b in zip(sup, sup[1:])]
    k = int(np.argmax(gaps)) + 1
    upper = sup[k:]
    bulk2 = Support(upper[0].lower, upper[-1].upper, sum(s.mass for s in upper),
                    max(s.resolution for s in upper))
    lower = sup[:k]
    bulk1 = max(lower, key=lambda s: s.mass)
    minor = [s for s in lower if s is not bulk1]
    return minor, bulk1, bulk2


# ---------------------------------------------------------------------------
# closed-form pieces of the large-psi description


def delta_weight(psi_p, psi_n):
    """Mass of the eigenvalue ``s_t^2``: ``max(0, 1 - (1 + psi_n)/psi_p)``."""
    return max(0.0, 1.0 - (1.0 + psi_n) / psi_p)


def bulk1_edges(constants, psi_p, psi_n):
    """``s_t^2 + v_t^2 (1 -/+ sqrt(psi_p/psi_n))^2``."""
    if psi_p <= 0 or psi_n <= 0:
        raise ValueError("psi_p and psi_n must be > 0")
    c = constants
    root = math.sqrt(psi_p / psi_n)
    return c.s_t2 + c.v_t2 * (1.0 - root) ** 2, c.s_t2 + c.v_t2 * (1.0 + root) ** 2


def default_grid(constants, psi_p, psi_n, measure, n_points=(1200, 1200), hi=None):
    """Grid covering the delta peak, the ``psi_p/psi_n`` bulk (geometric spacing)
    and the ``psi_p`` bulk (linear spacing)."""
    c = constants
    _, up1 = bulk1_edges(c, psi_p, psi_n)
    if hi is None:
        lam_max = measure.lambda_max
        spread = (1 + 1 / math.sqrt(psi_p)) ** 2 * (1 + 1 / math.sqrt(psi_n)) ** 2
        hi = 1.3 * (psi_p * (c.a_t**2 * c.decay * lam_max + c.b_t**2) * spread + up1)
    lo = max(c.s_t2 * 0.5, 1e-6)
    mid = max(2.0 * up1, 4.0 * c.s_t2)
    g1 = np.geomspace(lo, mid, n_points[0], endpoint=False)
    g2 = np.linspace(mid, hi, n_points[1])
    return np.concatenate([[0.0], g1, g2])


def density_plemelj(lambda_grid, measure, constants, psi_p, psi_n,
                    eps_schedule=(1e-1, 1e-2, 1e-3, 1e-4), opts=None):
    """``rho(lambda) = Im q(lambda + i eps) / pi`` with the analytic delta peak removed.

    The delta at ``s_t^2`` is subtracted as its exact Lorentzian at the final
    ``eps``; points within ``5 eps`` of it are additionally flagged as
    ``spike`` and excluded from masses.  Points where the solver failed are
    flagged in ``failed`` and carry NaN.
    """
    opts = opts or SolverOptions()
    sys = _System(measure, constants, psi_p, psi_n)
    grid = np.asarray(lambda_grid, dtype=float)
    eps_schedule = sorted(eps_schedule, reverse=True)
    scale = max(10.0, 2.0 * float(np.max(np.abs(grid))))
    q, r, s, res, it, failed = _continuation(sys, grid, eps_schedule[0], measure, opts, y_start=scale)
    for prev, eps in zip(eps_schedule[:-1], eps_schedule[1:]):
        q, r, s, res, itn, fn = _continuation(sys, grid, eps, measure, opts, y_start=prev, q0=q, r0=r)
        failed |= fn
    eps = eps_schedule[-1]
    rho = q.imag / math.pi
    f = delta_weight(psi_p, psi_n)
    s2 = constants.s_t2
    rho = rho - f * eps / math.pi / ((grid - s2) ** 2 + eps**2)
    spike = np.abs(grid - s2) < 5 * eps if f > 0 else np.zeros(grid.size, dtype=bool)
    rho = np.where(failed, np.nan, rho)
    if failed.any():
        logger.warning("Stieltjes solver failed at %d of %d grid points", failed.sum(), grid.size)
    return DensityCurve(grid, rho, eps, s2, f, spike, failed)


# ---------------------------------------------------------------------------
# population bulk (Bai-Silverstein)


def _population_atoms(measure, constants):
    """Eigenvalues of the population signal part: ``b_t^2 + e^{-2t} a_t^2 lambda``."""
    c = constants
    return c.b_t**2 + c.a_t**2 * c.decay * measure.eigenvalues


def _bs_newton(zp, q, mu, w, psi_p, opts):
    """Newton on ``f(q) = q (z' - int mu/(1 + psi_p q mu)) + 1``."""
    res = np.full(zp.size, np.inf)
    for _ in range(opts.newton_iter):
        den = 1.0 + psi_p * q[None, :] * mu[:, None]
        integ = (w[:, None] * mu[:, None] / den).sum(0)
        f = q * (zp - integ) + 1.0
        res = np.abs(f) / (np.abs(q * zp) + np.abs(q * integ) + 1.0)
        if (res < opts.tol).all():
            break
        dinteg = -(w[:, None] * psi_p * mu[:, None] ** 2 / den**2).sum(0)
        df = zp - integ - q * dinteg
        step = f / df
        new = q - step
        # keep to the upper half plane
        shrink = 1.0
        for _ in range(20):
            bad = new.imag <= 0
            if not bad.any():
                break
            shrink *= 0.5
            new = np.where(bad, q - shrink * step, new)
        q = np.where(res < opts.tol, q, new)
    return q, res


def stieltjes_population(z, measure, constants, psi_p, opts=None, warm=None):
    """Stieltjes transform of the population matrix at ``z`` (Im z > 0)."""
    opts = opts or SolverOptions()
    c = constants
    mu = _population_atoms(measure, c)
    w = measure.weights
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    zp = z - c.s_t2 - max(c.v_t2, 0.0)
    q = -1.0 / zp if warm is None else np.array(warm, dtype=complex)
    return _bs_newton(zp, q, mu, w, psi_p, opts)


def rho2_density(measure, constants, psi_p, lambda_grid, eps=1e-4, opts=None,
                 eps_schedule=None):
    """Continuous part of the population-matrix spectrum (weight ``1/psi_p``).

    Independent of ``psi_n`` by construction.  The population matrix also has
    an atom of weight ``1 - 1/psi_p`` at ``s_t^2 + v_t^2`` which is removed
    analytically, as for the full density.
    """
    opts = opts or SolverOptions()
    c = constants
    grid = np.asarray(lambda_grid, dtype=float)
    if eps_schedule is None:
        eps_schedule = [e for e in (1e-1, 1e-2, 1e-3, 1e-4) if e > eps] + [eps]
    eps_schedule = sorted(eps_schedule, reverse=True)
    scale = max(10.0, 2.0 * float(np.max(np.abs(grid))))
    # continuation in Im z from far away, then through the eps schedule
    ys = list(np.geomspace(scale, eps_schedule[0], 40)) + eps_schedule[1:]
    q = None
    failed = np.zeros(grid.size, dtype=bool)
    for y in ys:
        q, res = stieltjes_population(grid + 1j * y, measure, c, psi_p, opts, warm=q)
        failed = res >= max(opts.tol, 1e-8)
    rho = q.imag / math.pi
    loc = c.s_t2 + max(c.v_t2, 0.0)
    f = max(0.0, 1.0 - 1.0 / psi_p)
    rho = rho - f * eps / math.pi / ((grid - loc) ** 2 + eps**2)
    spike = np.abs(grid - loc) < 5 * eps if f > 0 else np.zeros(grid.size, dtype=bool)
    rho = np.where(failed, np.nan, rho)
    return DensityCurve(grid, rho, eps, loc, f, spike, failed)


def rho2_grid(measure, constants, psi_p, n_points=2000):
    c = constants
    mu = _population_atoms(measure, c)
    hi = psi_p * mu.max() * (1 + 1 / math.sqrt(psi_p)) ** 2 * 1.2 + c.s_t2 + c.v_t2
    lo = max(0.0, psi_p * mu.min() * (1 - 1 / math.sqrt(psi_p)) ** 2 * 0.8)
    return np.linspace(lo, hi, n_points)


def rho2_lower_edge(measure, constants, psi_p, n_points=2000, eps=1e-4):
    curve = rho2_density(measure, constants, psi_p, rho2_grid(measure, constants, psi_p, n_points), eps)
    sup = curve.supports()
    if not sup:
        raise ConvergenceError("empty population bulk")
    return sup[0].lower, sup[-1].upper, curve


# ---------------------------------------------------------------------------


def timescales(constants, psi_p, psi_n, measure=None, bulk2_lower=None):
    """``(tau_gen, tau_mem)``: ``psi_p / (delta_t * lambda)`` at the lower edges
    of the population bulk and of the ``psi_p/psi_n`` bulk respectively."""
    c = constants
    lm, _ = bulk1_edges(c, psi_p, psi_n)
    if measure is None:
        from .features import SpectralMeasure

        measure = SpectralMeasure.isotropic(c.sigma_x2)
    if bulk2_lower is None:
        bulk2_lower, _, _ = rho2_lower_edge(measure, c, psi_p)
    tau_mem = psi_p / (c.delta_t * lm)
    tau_gen = psi_p / (c.delta_t * bulk2_lower)
    return tau_gen, tau_mem


def empirical_spectrum(U, atol=1e-8):
    """Ascending eigenvalues of a symmetric matrix."""
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError("expected a square matrix")
    asym = np.max(np.abs(U - U.T)) if U.size else 0.0
    if asym > atol * max(1.0, np.max(np.abs(U))):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return np.linalg.eigvalsh(0.5 * (U + U.T))


def summarize(measure, constants, psi_p, psi_n, curve=None, rel_threshold=1e-3):
    """Assemble the summary; bulk-2 edges come from the population density."""
    c = constants
    lo2, hi2, _ = rho2_lower_edge(measure, c, psi_p)
    tau_gen, tau_mem = timescales(c, psi_p, psi_n, measure, bulk2_lower=lo2)
    regime = "overparametrized" if psi_p > psi_n else "underparametrized"
    extra = {}
    if curve is not None:
        extra["analytic_supports"] = [
            {"lower": s.lower, "upper": s.upper, "mass": s.mass, "resolution": s.resolution}
            for s in curve.supports(rel_threshold)
        ]
        extra["epsilon_used"] = curve.epsilon_used
    return SpectrumSummary(
        delta_location=c.s_t2,
        delta_weight=delta_weight(psi_p, psi_n),
        bulk1_edges=bulk1_edges(c, psi_p, psi_n),
        bulk2_edges=(lo2, hi2),
        tau_gen=tau_gen,
        tau_mem=tau_mem,
        regime=regime,
        extra=extra,
    )
