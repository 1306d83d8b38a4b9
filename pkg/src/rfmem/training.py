"""Score-matching dynamics of the random-features model at fixed diffusion time.

Losses are normalized by ``d`` so that ``A = 0`` gives exactly 1.  Time is
reported as ``tau = k * eta / d**2``.  Working with ``At = A / sqrt(p)`` the
loss reads ``1 + (delta/d) Tr(At U At^T) + (2 sqrt(delta)/d) Tr(At V)`` and the
gradient flow is linear in ``At`` with rate matrix ``2 delta U / psi_p``.
"""

from dataclasses import dataclass, field
import logging
import math
import warnings

import numpy as np

from .constants import compute_constants

logger = logging.getLogger(__name__)


class StepSizeError(RuntimeError):
    """Raised when the training loss blows up."""


@dataclass
class TrainConfig:
    t: float
    eta: float
    n_steps: int
    optimizer: str = "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    record_times: tuple = ()
    a0: str = "zero"
    a0_scale: float = 1.0
    a0_seed: int = 0
    auto_step: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.a0 not in ("zero", "gaussian"):
            raise ValueError(f"unknown a0 {self.a0!r}")
        rt = tuple(float(x) for x in self.record_times)
        if any(b < a for a, b in zip(rt, rt[1:])):
            raise ValueError("record_times must be sorted ascending")
        self.record_times = rt

    def initial_A(self, d, p):
        if self.a0 == "zero":
            return np.zeros((d, p))
        return self.a0_scale * np.random.default_rng(self.a0_seed).standard_normal((d, p))


@dataclass
class TrainingTrace:
    tau: np.ndarray
    l_train: np.ndarray
    l_test: np.ndarray
    e_score: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def l_gen(self):
        return self.l_test - self.l_train

    def rows(self):
        for row in zip(self.tau, self.l_train, self.l_test, self.l_gen, self.e_score):
            yield tuple(float(v) for v in row)


def _check(A, gram):
    d, p = A.shape
    if gram.U.shape != (p, p) or gram.V.shape != (p, d):
        raise ValueError(f"A {A.shape} inconsistent with U {gram.U.shape}, V {gram.V.shape}")


def loss_trace_form(A, gram, t):
    """``1 + (delta/d) Tr(A^T A U)/p + (2 sqrt(delta)/(d sqrt(p))) Tr(A V)``."""
    A = np.asarray(A, dtype=float)
    _check(A, gram)
    d, p = A.shape
    delta = -math.expm1(-2.0 * t)
    quad = np.einsum("ij,ij->", A @ gram.U, A)
    lin = np.einsum("ij,ji->", A, gram.V)
    return 1.0 + delta / d * quad / p + 2.0 * math.sqrt(delta) / (d * math.sqrt(p)) * lin


def grad_A(A, gram, t):
    """Exact gradient of :func:`loss_trace_form` with respect to ``A``."""
    A = np.asarray(A, dtype=float)
    _check(A, gram)
    d, p = A.shape
    delta = -math.expm1(-2.0 * t)
    return (2.0 * delta / d) * (A @ gram.U) / p + (2.0 * math.sqrt(delta) / (d * math.sqrt(p))) * gram.V.T


def fixed_point_A(gram, t):
    """Stationary point ``A* = -sqrt(p) V^T U^{-1} / sqrt(delta)``."""
    p = gram.U.shape[0]
    delta = -math.expm1(-2.0 * t)
    lam, Q = gram.eigh()
    lam = _floored(lam)
    return -math.sqrt(p / delta) * ((gram.V.T @ Q) / lam) @ Q.T


def _floored(lam, floor=1e-12):
    scale = max(float(np.max(np.abs(lam))), 1.0)
    if lam.min() < floor * scale:
        warnings.warn(
            f"U is ill-conditioned (smallest eigenvalue {lam.min():.3e}); flooring", RuntimeWarning
        )
        return np.maximum(lam, floor * scale)
    return lam


def closed_form_A(tau, gram, t, a0=None, psi_p=None):
    """Exact gradient-flow solution at rescaled time ``tau``.

    ``A(tau)/sqrt(p) = -V^T U^{-1}/sqrt(delta)
    + (V^T U^{-1}/sqrt(delta) + A0/sqrt(p)) exp(-2 delta U tau / psi_p)``,
    evaluated in the cached eigenbasis of ``U``.
    """
    p, d = gram.V.shape
    if a0 is not None:
        a0 = np.asarray(a0, dtype=float)
        if a0.shape != (d, p):
            raise ValueError(f"a0 must have shape {(d, p)}")
    if tau == 0:
        return np.zeros((d, p)) if a0 is None else a0.copy()
    if psi_p is None:
        psi_p = p / d
    delta = -math.expm1(-2.0 * t)
    lam, Q = gram.eigh()
    lam = _floored(lam)
    e = np.exp(-2.0 * delta * lam * tau / psi_p)
    B = gram.V.T @ Q
    C = B * (-(-np.expm1(-2.0 * delta * lam * tau / psi_p)) / (lam * math.sqrt(delta)))
    if a0 is not None:
        C = C + (a0 / math.sqrt(p)) @ Q * e
    return math.sqrt(p) * C @ Q.T


# ---------------------------------------------------------------------------
# fast evaluation along the flow


@dataclass
class QuadraticObservable:
    """``const + alpha * Tr(At M At^T) + beta * Tr(At N)`` for ``At = A/sqrt(p)``.

    ``M`` (p x p) and ``N`` (p x d) are given in the original basis.
    """

    M: np.ndarray
    N: np.ndarray
    const: float
    alpha: float
    beta: float

    def __call__(self, A):
        p = A.shape[1]
        At = A / math.sqrt(p)
        return (
            self.const
            + self.alpha * np.einsum("ij,ij->", At @ self.M, At)
            + self.beta * np.einsum("ij,ji->", At, self.N)
        )


def loss_observable(gram, t):
    delta = -math.expm1(-2.0 * t)
    d = gram.V.shape[1]
    return QuadraticObservable(gram.U, gram.V, 1.0, delta / d, 2.0 * math.sqrt(delta) / d)


@dataclass
class ScoreStats:
    """Moments entering the score error ``(1/d) E||At phi(y) + Sigma_t^{-1} y||^2``.

    ``F = E[phi phi^T]``, ``C = E[phi y^T] Sigma_t^{-1}`` and
    ``const = E||Sigma_t^{-1} y||^2 / d``.
    """

    F: np.ndarray
    C: np.ndarray
    const: float
    provenance: dict = field(default_factory=dict)

    def observable(self):
        d = self.C.shape[1]
        return QuadraticObservable(self.F, self.C, self.const, 1.0 / d, 2.0 / d)


def _sigma_t(measure, d, t):
    return math.exp(-2.0 * t) * measure.diagonal(d) - math.expm1(-2.0 * t)


def score_stats_mc(model, measure, t, n_samples=10_000, seed=None, chunk=2048):
    """Monte-Carlo moments from ``n_samples`` points ``y ~ N(0, Sigma_t)``."""
    rng = np.random.default_rng(seed)
    d, p = model.d, model.p
    sig = _sigma_t(measure, d, t)
    F = np.zeros((p, p))
    C = np.zeros((p, d))
    const = 0.0
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        y = np.sqrt(sig)[:, None] * rng.standard_normal((d, m))
        phi = model.features(y)
        target = y / sig[:, None]
        F += phi @ phi.T
        C += phi @ target.T
        const += float(np.sum(target**2))
    F /= n_samples
    C /= n_samples
    F = 0.5 * (F + F.T)
    return ScoreStats(F, C, const / (n_samples * d), {"kind": "monte_carlo", "n_samples": n_samples, "seed": seed})


def score_stats_gep(W, measure, constants):
    """Gaussian-equivalent moments: ``F = U_tilde``, ``C = V / sqrt(delta)``."""
    from .features import build_U_tilde, gep_V

    d = W.shape[1]
    c = constants
    sig = _sigma_t(measure, d, c.t)
    return ScoreStats(
        build_U_tilde(W, measure, c),
        gep_V(W, c) / math.sqrt(c.delta_t),
        float(np.mean(1.0 / sig)),
        {"kind": "gaussian_equivalent"},
    )


def score_error(model, measure, t, n_samples=10_000, seed=None, chunk=2048):
    """``(1/d) mean ||s_A(y) + Sigma_t^{-1} y||^2`` over ``y ~ N(0, Sigma_t)``.

    Draws the same samples as :func:`score_stats_mc` for equal ``seed`` and ``chunk``.
    """
    rng = np.random.default_rng(seed)
    d = model.d
    sig = _sigma_t(measure, d, t)
    total = 0.0
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        y = np.sqrt(sig)[:, None] * rng.standard_normal((d, m))
        total += float(np.sum((model.score(y) + y / sig[:, None]) ** 2))
    return total / (n_samples * d)


class FlowEvaluator:
    """Observables along the exact flow from ``A0 = 0`` (or a given ``A0``).

    Each observable is reduced once to the eigenbasis ``Q`` of ``U_train``;
    afterwards each ``tau`` costs two quadratic forms in ``p`` variables.
    """

    def __init__(self, gram, t, a0=None):
        self.gram = gram
        self.t = float(t)
        self.delta = -math.expm1(-2.0 * t)
        p, d = gram.V.shape
        self.p, self.d = p, d
        self.psi_p = p / d
        lam, Q = gram.eigh()
        self.lam = _floored(lam)
        self.Q = Q
        self.B = gram.V.T @ Q  # d x p
        self.M0 = None if a0 is None or not np.any(a0) else (np.asarray(a0) / math.sqrt(p)) @ Q
        self._reduced = {}

    def _coeffs(self, tau):
        x = 2.0 * self.delta * self.lam * tau / self.psi_p
        e = np.exp(-x)
        c = np.expm1(-x) / (self.lam * math.sqrt(self.delta))
        return c, e

    def reduce(self, obs, key=None):
        """Precompute the per-mode tensors of an observable."""
        if key is not None and key in self._reduced:
            return self._reduced[key]
        # done in place: at p ~ 6400 every p x p temporary is ~330 MB
        Mq = self.Q.T @ obs.M
        Mq = Mq @ self.Q
        Nq = self.Q.T @ obs.N  # p x d
        red = {"g": np.einsum("kd,dk->k", Nq, self.B), "obs": obs}
        if self.M0 is not None:
            red["K2"] = (self.B.T @ self.M0) * Mq
            red["K3"] = (self.M0.T @ self.M0) * Mq
            red["g0"] = np.einsum("kd,dk->k", Nq, self.M0)
        Mq *= self.B.T @ self.B
        red["K"] = Mq
        if key is not None:
            self._reduced[key] = red
        return red

    def evaluate(self, red, taus):
        obs = red["obs"]
        out = np.empty(len(taus))
        for i, tau in enumerate(taus):
            c, e = self._coeffs(tau)
            quad = c @ red["K"] @ c
            lin = c @ red["g"]
            if self.M0 is not None:
                quad += 2.0 * c @ red["K2"] @ e + e @ red["K3"] @ e
                lin += e @ red["g0"]
            out[i] = obs.const + obs.alpha * quad + obs.beta * lin
        return out

    def train_loss(self, taus):
        if self.M0 is not None:
            return self.evaluate(self.reduce(loss_observable(self.gram, self.t), "train"), taus)
        # diagonal in the eigenbasis
        bn = np.sum(self.B**2, axis=0)
        out = np.empty(len(taus))
        for i, tau in enumerate(taus):
            c, _ = self._coeffs(tau)
            out[i] = 1.0 + self.delta / self.d * np.sum(c**2 * self.lam * bn) + 2.0 * math.sqrt(self.delta) / self.d * np.sum(c * bn)
        return out

    def A(self, tau):
        c, e = self._coeffs(tau)
        C = self.B * c
        if self.M0 is not None:
            C = C + self.M0 * e
        return math.sqrt(self.p) * C @ self.Q.T


def flow_trace(gram_train, t, taus, gram_test=None, score_stats=None, a0=None):
    """Closed-form trace of all observables at the requested ``taus``."""
    taus = np.asarray(taus, dtype=float)
    ev = FlowEvaluator(gram_train, t, a0)
    l_train = ev.train_loss(taus)
    nan = np.full(taus.size, np.nan)
    l_test = ev.evaluate(ev.reduce(loss_observable(gram_test, t)), taus) if gram_test is not None else nan
    e_score = ev.evaluate(ev.reduce(score_stats.observable()), taus) if score_stats is not None else nan
    prov = {"method": "closed_form", "l_train": "trace_form",
            "l_test": "trace_form" if gram_test is not None else None,
            "e_score": score_stats.provenance if score_stats is not None else None}
    return TrainingTrace(taus, l_train, l_test, e_score, prov)


# ---------------------------------------------------------------------------
# iterative training


def stable_eta(gram, t, d, target=1.9):
    """Largest GD step with ``(eta/d^2) * 2 delta lambda_max / psi_p`` equal to ``target``."""
    p = gram.U.shape[0]
    delta = -math.expm1(-2.0 * t)
    lam_max = float(np.linalg.eigvalsh(gram.U)[-1]) if gram._eig is None else float(gram._eig[0][-1])
    return target * d**2 * (p / d) / (2.0 * delta * lam_max)


def _record_steps(config, h):
    steps = []
    for tau in config.record_times:
        k = int(math.ceil(tau / h - 1e-9))
        if k <= config.n_steps:
            steps.append(k)
    if not steps:
        steps = [config.n_steps]
    return sorted(set(steps))


def train(model, gram_train, gram_test=None, config=None, score_stats=None):
    """Full-batch gradient descent (or Adam) on the trace-form loss.

    ``model.A`` is updated in place.  Observables are recorded at the first
    step whose ``tau = k eta / d^2`` reaches each of ``config.record_times``
    (just the final step when none are given).  For GD the step is reduced
    automatically when it violates the stability bound.
    """
    d, p = model.d, model.p
    t = config.t
    eta = config.eta
    delta = -math.expm1(-2.0 * t)
    if config.optimizer == "gd":
        eta_max = stable_eta(gram_train, t, d)
        if eta > eta_max:
            if not config.auto_step:
                raise StepSizeError(f"eta={eta} exceeds the stability bound {eta_max:.4g}")
            warnings.warn(f"eta={eta} exceeds the stability bound; using {eta_max:.4g}", RuntimeWarning)
            eta = eta_max
    h = eta / d**2
    A = config.initial_A(d, p)
    model.A = A
    record = set(_record_steps(config, h))
    observe = [lambda A: loss_trace_form(A, gram_train, t)]
    observe.append((lambda A: loss_trace_form(A, gram_test, t)) if gram_test is not None else (lambda A: np.nan))
    sobs = score_stats.observable() if score_stats is not None else None
    observe.append(sobs if sobs is not None else (lambda A: np.nan))
    rows = []
    l0 = observe[0](A)
    if 0 in record:
        rows.append((0.0, l0, observe[1](A), observe[2](A)))
    m = np.zeros_like(A)
    v = np.zeros_like(A)
    b1, b2 = config.beta1, config.beta2
    for k in range(1, config.n_steps + 1):
        g = grad_A(A, gram_train, t)
        if config.optimizer == "gd":
            A -= eta * g
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**k)
            vhat = v / (1 - b2**k)
            A -= eta * mhat / (np.sqrt(vhat) + config.adam_eps)
        if k in record or k % 1000 == 0:
            lt = observe[0](A)
            if not np.isfinite(lt) or lt > 10.0 * l0:
                raise StepSizeError(f"training loss diverged at step {k} (L={lt:.3e}, L0={l0:.3e}, eta={eta})")
            if k in record:
                rows.append((k * h, lt, observe[1](A), observe[2](A)))
    model.A = A
    if not rows and config.n_steps == 0:
        rows.append((0.0, l0, observe[1](A), observe[2](A)))
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    prov = {"method": config.optimizer, "eta": eta, "l_train": "trace_form",
            "l_test": "trace_form" if gram_test is not None else None,
            "e_score": score_stats.provenance if score_stats is not None else None}
    return TrainingTrace(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], prov)


def eval_losses_mc(model, dataset, t, n_noise=100, seed=None):
    """Monte-Carlo loss ``(1/d) E||sqrt(delta) s_A(x_t) + xi||^2``; returns ``(mean, stderr)``.

    The standard error treats the per-data-point averages as independent.
    """
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    rng = np.random.default_rng(seed)
    d, n = dataset.X.shape
    decay = math.exp(-t)
    sq = math.sqrt(-math.expm1(-2.0 * t))
    per_point = np.empty(n)
    cols = max(1, 4096 // n_noise)
    for start in range(0, n, cols):
        x = dataset.X[:, start:start + cols]
        m = x.shape[1]
        xi = rng.standard_normal((d, m * n_noise))
        y = decay * np.repeat(x, n_noise, axis=1) + sq * xi
        r = np.sum((sq * model.score(y) + xi) ** 2, axis=0) / d
        per_point[start:start + m] = r.reshape(m, n_noise).mean(axis=1)
    return float(per_point.mean()), float(per_point.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


# ---------------------------------------------------------------------------
# trace analysis


def onset_time(trace, threshold=0.01):
    """First recorded ``tau`` where ``l_gen`` exceeds ``threshold`` (NaN if never)."""
    idx = np.flatnonzero(trace.l_gen > threshold)
    return float(trace.tau[idx[0]]) if idx.size else float("nan")


def generalization_time(trace, rel=0.1):
    """First recorded ``tau`` where ``e_score`` is within ``rel`` of its minimum."""
    e = np.asarray(trace.e_score)
    emin = np.nanmin(e)
    idx = np.flatnonzero(e <= emin * (1.0 + rel))
    return float(trace.tau[idx[0]])


def fit_proportional(x, y):
    """Least-squares ``y = c x`` through the origin; returns ``(c, r2)``.

    ``r2`` is computed against the mean of ``y`` (ordinary coefficient of
    determination of the constrained fit).
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    c = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - c * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return c, 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def fit_power_law(x, y):
    """Slope and intercept of ``log y`` against ``log x``."""
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def log_times(lo=1e-1, hi=1e7, n=200):
    return np.geomspace(lo, hi, n)
