"""Reverse-diffusion sampling, memorization fraction and KL estimation.

Conventions follow the forward Ornstein-Uhlenbeck process
``x_t = e^{-t} x_0 + sqrt(delta_t) xi`` with ``delta_t = 1 - e^{-2t}``, so a
DDPM/DDIM schedule with cumulative product ``alpha_bar`` corresponds to
``t = -log(alpha_bar) / 2``.  Sample matrices are ``d x n`` (one column per
sample), like the training data.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

logger = logging.getLogger(__name__)

BLOCK = 256  # samples per RNG stream


def _delta(t):
    return -math.expm1(-2.0 * t)


def forward_noise(x0, t, xi):
    """``e^{-t} x0 + sqrt(delta_t) xi``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return math.exp(-t) * np.asarray(x0, float) + math.sqrt(_delta(t)) * np.asarray(xi, float)


def _as_columns(x):
    x = np.asarray(x, dtype=float)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def empirical_score(x, t, X_train):
    """Score of ``(1/n) sum_nu N(e^{-t} x^nu, delta_t I)`` at ``x`` (vector or ``d x m``)."""
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("empty training set")
    delta = _delta(t)
    if delta <= 0:
        raise ValueError("t must be > 0")
    xc, single = _as_columns(x)
    centers = math.exp(-t) * X  # d x n
    d2 = (
        np.sum(xc**2, axis=0)[:, None]
        - 2.0 * xc.T @ centers
        + np.sum(centers**2, axis=0)[None, :]
    )
    w = softmax(-d2 / (2.0 * delta), axis=1)  # m x n
    s = (centers @ w.T - xc) / delta
    return s[:, 0] if single else s


def empirical_log_density(x, t, X_train):
    X = np.asarray(X_train, dtype=float)
    d, n = X.shape
    delta = _delta(t)
    xc, single = _as_columns(x)
    centers = math.exp(-t) * X
    d2 = cdist(xc.T, centers.T, "sqeuclidean")
    out = logsumexp(-d2 / (2.0 * delta), axis=1) - math.log(n) - 0.5 * d * math.log(2 * math.pi * delta)
    return out[0] if single else out


def gmm_exact_score(x, t, mu):
    """``mu e^{-t} tanh(x . mu e^{-t}) - x``.

    Exact score at time ``t`` of ``P_0 = (N(mu, I) + N(-mu, I)) / 2`` under
    the forward process above: the noised law is the same mixture with
    centres ``+-mu e^{-t}`` and unit covariance.
    """
    m = math.exp(-t) * np.asarray(mu, dtype=float)
    xc, single = _as_columns(x)
    s = m[:, None] * np.tanh(m @ xc)[None, :] - xc
    return s[:, 0] if single else s


def gmm_log_density(x, mu):
    """Log-density of ``(N(mu, I) + N(-mu, I)) / 2``."""
    mu = np.asarray(mu, dtype=float)
    xc, single = _as_columns(x)
    d = mu.size
    a = -0.5 * np.sum((xc - mu[:, None]) ** 2, axis=0)
    b = -0.5 * np.sum((xc + mu[:, None]) ** 2, axis=0)
    out = np.logaddexp(a, b) - math.log(2.0) - 0.5 * d * math.log(2 * math.pi)
    return out[0] if single else out


def gmm_sample(mu, n, seed=None):
    rng = np.random.default_rng(seed)
    mu = np.asarray(mu, dtype=float)
    signs = rng.choice([-1.0, 1.0], size=n)
    return mu[:, None] * signs[None, :] + rng.standard_normal((mu.size, n))


def gmm_mean(d, normalize=False):
    """Default centre ``1_d``, or ``1_d / sqrt(d)`` when ``normalize``."""
    mu = np.ones(d)
    return mu / math.sqrt(d) if normalize else mu


@dataclass
class ScoreProvider:
    """Callable ``(x, t) -> score`` with ``x`` of shape ``d x m``."""

    kind: str
    d: int
    fn: object = field(repr=False)
    context: dict = field(default_factory=dict, repr=False)

    def __call__(self, x, t):
        return self.fn(x, t)

    @classmethod
    def exact_gmm(cls, mu):
        mu = np.asarray(mu, dtype=float)
        return cls("exact_gmm", mu.size, lambda x, t: gmm_exact_score(x, t, mu), {"mu": mu})

    @classmethod
    def empirical(cls, X_train):
        X = np.asarray(getattr(X_train, "X", X_train), dtype=float)
        if X.ndim != 2 or X.shape[1] == 0:
            raise ValueError("empty training set")
        return cls("empirical", X.shape[0], lambda x, t: empirical_score(x, t, X), {"X_train": X})

    @classmethod
    def gaussian(cls, d):
        """Standard normal target: ``s(x) = -x`` at every time."""
        return cls("gaussian", d, lambda x, t: -np.asarray(x, float))

    @classmethod
    def trained_rf(cls, snapshots):
        """Random-features models keyed by training time.

        Each model was fit at a single ``t``; at any other time the model whose
        ``t`` is nearest in ``log t`` is used, which is an approximation.
        """
        if not snapshots:
            raise ValueError("no snapshots")
        times = np.array(sorted(snapshots))
        models = [snapshots[k] for k in times]
        d = models[0].d

        def fn(x, t):
            k = int(np.argmin(np.abs(np.log(times) - math.log(max(t, 1e-300)))))
            return models[k].score(x)

        return cls("trained_rf", d, fn, {"times": times})


@dataclass
class SamplerConfig:
    scheme: str = "em"
    n_samples: int = 1000
    seed: int = 0
    steps: int = 1000
    T_start: float = 5.0
    t_min: float = 1e-3
    T_horizon: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    ddim_steps: int = 200
    denoise_last: bool = True

    def __post_init__(self):
        if self.scheme not in ("em", "ddim"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.t_min > 0:
            raise ValueError("t_min must be > 0")
        if math.exp(-2.0 * self.T_start) >= 1e-3:
            raise ValueError("T_start too small: need exp(-2 T_start) < 1e-3")
        if self.T_start <= self.t_min:
            raise ValueError("T_start must exceed t_min")
        if self.steps < 1 or self.ddim_steps < 1 or self.n_samples < 1:
            raise ValueError("steps and n_samples must be >= 1")


def _block_rngs(seed, n):
    """One generator per block of ``BLOCK`` samples, keyed by (seed, block index)."""
    return [np.random.default_rng(np.random.SeedSequence([seed, b])) for b in range(-(-n // BLOCK))]


def _blocked_normal(rngs, d, n):
    out = np.empty((d, n))
    for b, rng in enumerate(rngs):
        sl = slice(b * BLOCK, min((b + 1) * BLOCK, n))
        out[:, sl] = rng.standard_normal((d, sl.stop - sl.start))
    return out


def sample_backward_em(provider, config):
    """Euler-Maruyama for ``-dx = [x + 2 s(x, t)] dt + sqrt(2) dW`` on a uniform grid
    from ``T_start`` down to ``t_min`` starting from ``N(0, I)``.

    With ``denoise_last`` the final step is taken without noise.  Otherwise its
    injected variance ``2 dt`` dominates the width ``delta_{t_min}`` of the
    target law when the grid is uniform.
    """
    d, n = provider.d, config.n_samples
    rngs = _block_rngs(config.seed, n)
    x = _blocked_normal(rngs, d, n)
    times = np.linspace(config.T_start, config.t_min, config.steps + 1)
    for k in range(config.steps):
        t, dt = times[k], times[k] - times[k + 1]
        noise = _blocked_normal(rngs, d, n)
        if config.denoise_last and k == config.steps - 1:
            noise[:] = 0.0
        x = x + (x + 2.0 * provider(x, t)) * dt + math.sqrt(2.0 * dt) * noise
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {k + 1} of {config.steps} (t={times[k + 1]:.4g})")
    return x


def ddpm_alpha_bar(T=1000, beta_min=1e-4, beta_max=2e-2):
    betas = np.linspace(beta_min, beta_max, T)
    return np.cumprod(1.0 - betas)


def sample_ddim(provider, config):
    """Deterministic DDIM over ``ddim_steps`` of a linear ``beta`` schedule.

    The score is turned into a noise prediction ``xi = -sqrt(1 - alpha_bar) s``
    at ``t = -log(alpha_bar)/2``; the last update lands on ``alpha_bar = 1``.
    """
    d, n = provider.d, config.n_samples
    abar = ddpm_alpha_bar(config.T_horizon, config.beta_min, config.beta_max)
    idx = np.unique(np.round(np.linspace(0, config.T_horizon - 1, config.ddim_steps)).astype(int))[::-1]
    x = _blocked_normal(_block_rngs(config.seed, n), d, n)
    for j, i in enumerate(idx):
        a = abar[i]
        a_prev = abar[idx[j + 1]] if j + 1 < len(idx) else 1.0
        t = -0.5 * math.log(a)
        eps_hat = -math.sqrt(1.0 - a) * provider(x, t)
        x0 = (x - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)
        x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_hat
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at DDIM step {j + 1} of {len(idx)}")
    return x


def sample(provider, config):
    return sample_backward_em(provider, config) if config.scheme == "em" else sample_ddim(provider, config)


@dataclass
class MemorizationReport:
    f_mem: float
    ci_low: float
    ci_high: float
    k: float
    n_generated: int
    n_train: int
    ratios: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {"f_mem": self.f_mem, "ci_low": self.ci_low, "ci_high": self.ci_high, "k": self.k,
                "n_generated": self.n_generated, "n_train": self.n_train}


def neighbor_ratios(samples, X_train, chunk=2048):
    """Distance to the nearest over distance to the second-nearest training point.

    Only the two smallest distance values enter, so the result does not
    depend on the order of the training set.
    """
    S = np.asarray(samples, dtype=float)
    X = np.asarray(getattr(X_train, "X", X_train), dtype=float)
    if X.shape[1] < 2:
        raise ValueError("need at least two training points")
    out = np.empty(S.shape[1])
    for start in range(0, S.shape[1], chunk):
        dist = cdist(S[:, start:start + chunk].T, X.T)
        two = np.sort(np.partition(dist, 1, axis=1)[:, :2], axis=1, kind="stable")
        with np.errstate(invalid="ignore", divide="ignore"):
            r = two[:, 0] / two[:, 1]
        # both distances zero: duplicate training points, sample on top of them
        out[start:start + chunk] = np.where(two[:, 1] == 0, 0.0, r)
    return out


def memorization_fraction(samples, X_train, k=1.0 / 3.0, n_bootstrap=1000, seed=0):
    """Fraction of samples with nearest/second-nearest distance ratio below ``k``,
    with a percentile bootstrap 95% interval."""
    ratios = neighbor_ratios(samples, X_train)
    mem = (ratios < k).astype(float)
    f = float(mem.mean())
    rng = np.random.default_rng(seed)
    m = mem.size
    boots = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        boots[b] = mem[rng.integers(0, m, m)].mean()
    lo, hi = (np.percentile(boots, [2.5, 97.5]) if n_bootstrap > 0 else (f, f))
    X = np.asarray(getattr(X_train, "X", X_train))
    return MemorizationReport(f, float(min(lo, f)), float(max(hi, f)), float(k), int(m), int(X.shape[1]), ratios)


def kl_divergence_gmm(provider, mu, n_samples=10_000, schedule=None, seed=0, samples=None):
    """Estimate ``KL(P_model || P_0)`` for the two-component mixture ``P_0``.

    The cross-entropy is a plain Monte-Carlo average of ``log P_0`` over model
    samples.  The model entropy follows from the forward process,
    ``-H = -(d/2) log(2 pi e) + int E[x . s + |s|^2] dt``, with the provider's
    score standing in for that of the noised model law.  The samples live at
    ``t_min``, so they are noised by ``t - t_min``; the time integral runs on
    the DDPM grid (restricted to ``t >= t_min``) with the trapezoid rule.
    """
    schedule = schedule or SamplerConfig(n_samples=n_samples, seed=seed)
    if samples is None:
        if schedule.n_samples != n_samples:
            schedule = SamplerConfig(**{**schedule.__dict__, "n_samples": n_samples})
        samples = sample(provider, schedule)
    d, n = samples.shape
    t_min = schedule.t_min
    abar = ddpm_alpha_bar(schedule.T_horizon, schedule.beta_min, schedule.beta_max)
    grid = -0.5 * np.log(abar)
    grid = np.concatenate([[t_min], grid[grid > t_min]])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    vals = np.empty(grid.size)
    for i, t in enumerate(grid):
        xt = forward_noise(samples, t - t_min, rng.standard_normal((d, n)))
        s = provider(xt, t)
        vals[i] = float(np.mean(np.sum(xt * s + s * s, axis=0)))
    neg_entropy = -0.5 * d * math.log(2 * math.pi * math.e) + float(trapezoid(vals, grid))
    cross = float(np.mean(gmm_log_density(samples, mu)))
    return neg_entropy - cross
