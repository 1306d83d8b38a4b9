"""Gaussian expectations of the activation that enter the random-features theory.

All expectations are over standard normal variables and are evaluated with
probabilists' Gauss-Hermite rules.  Two-dimensional expectations use the full
tensor-product rule; the three-dimensional one defining ``v_t2`` factorizes
through the smoothed activation ``sigma0``.
"""

from dataclasses import asdict, dataclass, field
from functools import lru_cache
import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erf as _erf, roots_hermitenorm

# tanh(gamma*u) has poles at distance pi/(2*gamma) from the real axis, so the
# order needed for a given accuracy grows like gamma^2.  240 nodes give ~1e-13
# at unit scale; compute_constants scales this up with Gamma_t^2.
DEFAULT_ORDER = 240
MAX_AUTO_ORDER = 2000


def auto_order(gamma_t2):
    """Quadrature order used by :func:`compute_constants` when none is given."""
    return int(min(MAX_AUTO_ORDER, math.ceil(DEFAULT_ORDER * max(1.0, gamma_t2))))


@lru_cache(maxsize=32)
def _rule(order):
    nodes, weights = roots_hermitenorm(order)
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite_rule(order):
    """Nodes and weights integrating against the standard normal density.

    The rule is exact for polynomials of degree up to ``2 * order - 1`` and
    the weights sum to one.
    """
    order = int(order)
    if order < 2:
        raise ValueError(f"quadrature order must be >= 2, got {order}")
    return _rule(order)


@dataclass(frozen=True)
class Activation:
    """Element-wise activation with a zero Gaussian mean.

    ``kind`` is one of ``"tanh"``, ``"erf"``, ``"relu"`` (scaled, shifted
    ReLU) or ``"tabulated"``.  ``shift`` records the constant subtracted at
    construction to center the function at ``ref_scale``.
    """

    kind: str
    fn: object = field(repr=False, compare=False)
    shift: float = 0.0
    ref_scale: float = 1.0

    def __call__(self, x):
        return self.fn(x)

    @property
    def bounded(self):
        return self.kind in ("tanh", "erf", "tabulated")


def tanh():
    return Activation("tanh", np.tanh)


def erf():
    return Activation("erf", _erf)


def scaled_shifted_relu(scale=1.0, ref_scale=1.0):
    """``scale * max(x, 0)`` minus its mean under ``N(0, ref_scale**2)``.

    A non-odd function cannot be centered at every input scale, so the
    centering is exact only at ``ref_scale``; pick the preactivation scale
    ``gamma_t`` of the experiment.
    """
    shift = scale * ref_scale / math.sqrt(2.0 * math.pi)

    def fn(x):
        return scale * np.maximum(x, 0.0) - shift

    return Activation("relu", fn, shift=shift, ref_scale=ref_scale)


def tabulated(x, y, ref_scale=1.0, order=DEFAULT_ORDER):
    """Cubic interpolant through ``(x, y)``, constant outside the grid,
    re-centered to zero mean under ``N(0, ref_scale**2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 4:
        raise ValueError("tabulated activation needs matching 1-D grids of >= 4 points")
    order_idx = np.argsort(x)
    x, y = x[order_idx], y[order_idx]
    spline = CubicSpline(x, y)
    lo, hi = x[0], x[-1]

    def raw(v):
        return spline(np.clip(v, lo, hi))

    nodes, weights = gauss_hermite_rule(order)
    shift = float(weights @ raw(ref_scale * nodes))

    def fn(v):
        return raw(v) - shift

    return Activation("tabulated", fn, shift=shift, ref_scale=ref_scale)


ACTIVATIONS = {"tanh": tanh, "erf": erf, "relu": scaled_shifted_relu}


def get_activation(name):
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def sigma0(activation, eta, delta_t, order=DEFAULT_ORDER):
    """Smoothed activation ``E_u[sigma(eta + sqrt(delta_t) u)]``; ``eta`` may be an array."""
    if not 0.0 < delta_t <= 1.0:
        raise ValueError(f"delta_t must lie in (0, 1], got {delta_t}")
    if isinstance(activation, str):
        activation = get_activation(activation)
    nodes, weights = gauss_hermite_rule(order)
    eta = np.asarray(eta, dtype=float)
    vals = activation(eta[..., None] + math.sqrt(delta_t) * nodes)
    return vals @ weights


@dataclass(frozen=True)
class ScalarConstants:
    t: float
    delta_t: float
    sigma_x2: float
    gamma_t2: float
    a_t: float
    b_t: float
    v_t2: float
    s_t2: float
    mu1: float
    sigma_norm2: float

    @property
    def decay(self):
        """``e^{-2t}``."""
        return math.exp(-2.0 * self.t)

    def to_dict(self):
        return asdict(self)

    def identity_residuals(self):
        """Residuals of the exact Gaussian identities (all vanish up to quadrature error).

        By Stein's lemma ``a_t = mu1 / gamma_t`` and ``b_t = sqrt(delta_t) mu1 / gamma_t``.
        """
        e2 = self.decay
        g2 = self.gamma_t2
        return {
            "mu1_decomposition": self.mu1**2 - (e2 * self.sigma_x2 * self.a_t**2 + self.b_t**2),
            "b_stein": self.b_t**2 - self.delta_t * self.mu1**2 / g2,
            "a_stein": self.a_t**2 - self.mu1**2 / g2,
            "s_definition": self.s_t2
            - (self.sigma_norm2 - self.a_t**2 * e2 * self.sigma_x2 - self.v_t2 - self.b_t**2),
        }


def compute_constants(activation, sigma_x2, t, order=None):
    """Evaluate every time-dependent activation constant at diffusion time ``t``.

    ``order=None`` picks :func:`auto_order` from the preactivation variance.
    ReLU has a kink, so Gauss-Hermite converges only algebraically for it
    (absolute error around 1e-4 at a few hundred nodes); the smooth
    activations converge geometrically.
    """
    if t <= 0:
        raise ValueError(f"diffusion time must be > 0 (constants are singular at t=0), got {t}")
    if sigma_x2 <= 0:
        raise ValueError(f"sigma_x2 must be > 0, got {sigma_x2}")
    if isinstance(activation, str):
        activation = get_activation(activation)
    e2 = math.exp(-2.0 * t)
    delta_t = -math.expm1(-2.0 * t)
    gamma_t2 = e2 * sigma_x2 + delta_t
    nodes, weights = gauss_hermite_rule(auto_order(gamma_t2) if order is None else order)
    alpha = math.sqrt(e2 * sigma_x2)  # data part of the preactivation scale
    beta = math.sqrt(delta_t)         # noise part

    grid = activation(alpha * nodes[:, None] + beta * nodes[None, :])  # [u, v]
    smooth = grid @ weights                                             # sigma0(alpha u)
    a_t = float(weights @ (smooth * nodes)) / alpha
    b_t = float(weights @ (grid @ (weights * nodes)))
    v_t2 = float(weights @ smooth**2) - a_t**2 * alpha**2

    gamma = math.sqrt(gamma_t2)
    on_scale = activation(gamma * nodes)
    sigma_norm2 = float(weights @ on_scale**2)
    mu1 = float(weights @ (on_scale * nodes))
    s_t2 = sigma_norm2 - a_t**2 * alpha**2 - v_t2 - b_t**2
    return ScalarConstants(
        t=float(t),
        delta_t=delta_t,
        sigma_x2=float(sigma_x2),
        gamma_t2=gamma_t2,
        a_t=a_t,
        b_t=b_t,
        v_t2=v_t2,
        s_t2=s_t2,
        mu1=mu1,
        sigma_norm2=sigma_norm2,
    )
