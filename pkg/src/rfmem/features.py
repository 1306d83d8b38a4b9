"""Random-features score model and the Gram matrices driving its training.

The data covariance is always diagonal: the first-layer weights are
rotation invariant, so only the spectrum of the covariance matters.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .constants import Activation, ScalarConstants, get_activation


@dataclass(frozen=True)
class SpectralMeasure:
    """Discrete eigenvalue measure ``sum_i w_i delta(lambda - lambda_i)``."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple((float(lam), float(w)) for lam, w in self.atoms)
        if not atoms:
            raise ValueError("spectral measure needs at least one atom")
        for lam, w in atoms:
            if not (np.isfinite(lam) and lam >= 0):
                raise ValueError(f"eigenvalues must be finite and >= 0, got {lam}")
            if not w > 0:
                raise ValueError(f"atom weights must be > 0, got {w}")
        total = sum(w for _, w in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"atom weights must sum to 1, got {total!r}")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def isotropic(cls, variance=1.0):
        return cls(((variance, 1.0),))

    @classmethod
    def parse(cls, text):
        """Parse ``"lam:w,lam:w"``; a bare ``"lam"`` means a single atom."""
        atoms = []
        for chunk in text.replace(";", ",").split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" in chunk:
                lam, w = chunk.split(":")
                atoms.append((float(lam), float(w)))
            else:
                atoms.append((float(chunk), 1.0))
        if len(atoms) > 1 and all(w == 1.0 for _, w in atoms):
            atoms = [(lam, 1.0 / len(atoms)) for lam, _ in atoms]
        return cls(tuple(atoms))

    @property
    def eigenvalues(self):
        return np.array([lam for lam, _ in self.atoms])

    @property
    def weights(self):
        return np.array([w for _, w in self.atoms])

    @property
    def sigma_x2(self):
        """Normalized trace ``Tr(Sigma) / d``."""
        return float(self.weights @ self.eigenvalues)

    @property
    def lambda_max(self):
        return float(self.eigenvalues.max())

    def multiplicities(self, d):
        """Integer multiplicities summing to ``d`` (largest-remainder rounding)."""
        raw = self.weights * d
        counts = np.floor(raw).astype(int)
        remainder = d - counts.sum()
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
        return counts

    def diagonal(self, d):
        """Diagonal of a ``d x d`` covariance realizing this measure."""
        return np.repeat(self.eigenvalues, self.multiplicities(d))

    def realized(self, d):
        """The measure actually realized in dimension ``d`` after rounding."""
        counts = self.multiplicities(d)
        return SpectralMeasure(
            tuple((lam, c / d) for lam, c in zip(self.eigenvalues, counts) if c > 0)
        )

    def to_list(self):
        return [list(a) for a in self.atoms]


@dataclass
class Dataset:
    """Training set stored column-wise: ``X`` is ``d x n``."""

    X: np.ndarray
    measure: SpectralMeasure
    seed: object = None

    @property
    def d(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def covariance_diag(self):
        return self.measure.diagonal(self.d)


def sample_weights(p, d, seed):
    """Frozen first layer: ``p x d`` i.i.d. standard normal entries."""
    if p < 1 or d < 1:
        raise ValueError("p and d must be >= 1")
    return np.random.default_rng(seed).standard_normal((p, d))


def sample_gaussian_data(d, n, measure, seed):
    """``n`` samples of ``N(0, Sigma)`` with ``Sigma`` diagonal of spectrum ``measure``."""
    if measure is None or not measure.atoms:
        raise ValueError("empty spectral measure")
    rng = np.random.default_rng(seed)
    diag = measure.diagonal(d)
    X = np.sqrt(diag)[:, None] * rng.standard_normal((d, n))
    return Dataset(X, measure, seed)


@dataclass
class RFModel:
    """``s_A(x) = A sigma(W x / sqrt(d)) / sqrt(p)`` with ``W`` frozen."""

    W: np.ndarray
    activation: Activation
    A: np.ndarray = None

    def __post_init__(self):
        if isinstance(self.activation, str):
            self.activation = get_activation(self.activation)
        W = np.array(self.W, dtype=float)
        W.setflags(write=False)
        self.W = W
        if self.A is None:
            self.A = np.zeros((self.d, self.p))
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (self.d, self.p):
            raise ValueError(f"A must be {(self.d, self.p)}, got {self.A.shape}")

    @property
    def p(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def features(self, x):
        """``sigma(W x / sqrt(d))`` for a vector or a ``d x m`` block of columns."""
        return self.activation(self.W @ x / math.sqrt(self.d))

    def score(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.d:
            raise ValueError(f"input has leading dimension {x.shape[0]}, model expects d={self.d}")
        return self.A @ self.features(x) / math.sqrt(self.p)


def score(model, x):
    return model.score(x)


@dataclass
class GramPair:
    """``U`` (p x p) and ``V`` (p x d) with a provenance record."""

    U: np.ndarray
    V: np.ndarray
    provenance: dict = field(default_factory=dict)
    _eig: tuple = field(default=None, repr=False)

    @property
    def p(self):
        return self.U.shape[0]

    def eigh(self):
        """Cached eigendecomposition ``(eigenvalues, eigenvectors)`` of ``U``."""
        if self._eig is None:
            self._eig = np.linalg.eigh(self.U)
        return self._eig


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def build_gram_mc(model, dataset, t, n_noise=100, seed=None, chunk=4096):
    """Monte-Carlo estimate of ``U`` and ``V``: ``n_noise`` fresh noises per data point."""
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    rng = np.random.default_rng(seed)
    d, n = dataset.X.shape
    p = model.p
    decay = math.exp(-t)
    sq = math.sqrt(-math.expm1(-2.0 * t))
    U = np.zeros((p, p))
    V = np.zeros((p, d))
    cols = max(1, chunk // n_noise)
    for sl in _chunks(n, cols):
        x = dataset.X[:, sl]
        m = x.shape[1]
        xi = rng.standard_normal((d, m, n_noise)).reshape(d, m * n_noise)
        y = decay * np.repeat(x, n_noise, axis=1) + sq * xi
        phi = model.features(y)
        U += phi @ phi.T
        V += phi @ xi.T
    total = n * n_noise
    U /= total
    V /= total
    U = 0.5 * (U + U.T)
    return GramPair(U, V, {"kind": "monte_carlo", "n_noise": int(n_noise), "seed": seed})


def gep_V(W, constants):
    """Gaussian-equivalent ``V = mu1 sqrt(delta_t) / gamma_t * W / sqrt(d)``."""
    c = constants
    d = W.shape[1]
    return (c.mu1 * math.sqrt(c.delta_t) / math.sqrt(c.gamma_t2)) * W / math.sqrt(d)


def build_gram_gep(W, dataset, constants, psi_n=None, seed=None):
    """Gaussian-equivalent ``U = G G^T / n + b_t^2 W W^T / d + s_t^2 I``
    with ``G = e^{-t} a_t W X / sqrt(d) + v_t Omega``.

    ``psi_n`` is optional and only checked against the dataset shape.
    """
    c = constants
    W = np.asarray(W, dtype=float)
    p, d = W.shape
    X = dataset.X
    n = X.shape[1]
    if X.shape[0] != d:
        raise ValueError(f"data dimension {X.shape[0]} does not match W ({d})")
    if psi_n is not None and abs(psi_n * d - n) > 0.5:
        raise ValueError(f"psi_n={psi_n} inconsistent with n={n}, d={d}")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((p, n))
    G = (math.exp(-c.t) * c.a_t / math.sqrt(d)) * (W @ X)
    G += math.sqrt(max(c.v_t2, 0.0)) * omega
    U = G @ G.T
    U /= n
    U += (c.b_t**2 / d) * (W @ W.T)
    U[np.diag_indices(p)] += c.s_t2
    U = 0.5 * (U + U.T)
    return GramPair(U, gep_V(W, c), {"kind": "gaussian_equivalent", "seed": seed})


def build_U_tilde(W, measure, constants):
    """Population Gram matrix ``mu1^2/gamma_t^2 W Sigma_t W^T / d + (||sigma||^2 - mu1^2) I``."""
    c = constants
    W = np.asarray(W, dtype=float)
    p, d = W.shape
    sigma_t = c.decay * measure.diagonal(d) + c.delta_t
    U = (c.mu1**2 / c.gamma_t2 / d) * ((W * sigma_t) @ W.T)
    U[np.diag_indices(p)] += c.sigma_norm2 - c.mu1**2
    return 0.5 * (U + U.T)
