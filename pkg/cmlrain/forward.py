"""
CML observation operator, noise models and likelihoods.

Link i observes y_i = a_i * sum_k Delta^i_k x_k^{b_i} + sigma_i z_i, where
Delta^i are the ray-tracing weights of the link.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import sparse

from .geometry import GridSpec, LinkSegment, LinkWeights, build_network_weights

# Base floor for x^(b-1) in the gradient at dry pixels
GRAD_EPS = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


class GridMismatchError(ValueError):
    """Raised when a field lives on a different grid than the operator."""
    pass


class NegativeFieldError(ValueError):
    """Raised when a rain field has negative entries."""
    pass


class DegenerateLikelihoodError(ValueError):
    """Raised when a likelihood has a zero noise level."""
    pass


@dataclass(frozen=True)
class RainField:
    """Non-negative H x W rain-rate field (mm/h) on a grid."""
    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != self.grid.shape:
            raise GridMismatchError(
                f"Field shape {values.shape} does not match grid shape {self.grid.shape}")
        if np.any(values < 0):
            raise NegativeFieldError("Rain field entries must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_flat(cls, flat: np.ndarray, grid: GridSpec, clamp: bool = False) -> "RainField":
        flat = np.asarray(flat, dtype=float)
        if clamp:
            flat = np.maximum(flat, 0.0)
        return cls(flat.reshape(grid.shape), grid)

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True)
class PowerLawParams:
    """Per-link power-law constants of A = a R^b."""
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Power-law parameters a and b must be positive")


@dataclass(frozen=True)
class NoiseModel:
    """
    Per-link observation noise.

    Args:
        kind: 'isotropic' or 'heteroscedastic'
        base_sigma: Reference noise level sigma
        sigmas: Per-link standard deviations
        link_lengths: Link lengths (heteroscedastic only)
    """
    kind: str
    base_sigma: float
    sigmas: np.ndarray
    link_lengths: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("isotropic", "heteroscedastic", "per-link"):
            raise ValueError(f"Unknown noise kind: {self.kind}")
        sigmas = np.array(self.sigmas, dtype=float, copy=True)
        if np.any(~np.isfinite(sigmas)) or np.any(sigmas < 0):
            raise ValueError("Noise standard deviations must be finite and non-negative")
        sigmas.setflags(write=False)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def isotropic(cls, sigma: float, m: int) -> "NoiseModel":
        return cls("isotropic", float(sigma), np.full(m, float(sigma)))

    @classmethod
    def heteroscedastic(cls, sigma: float, lengths: Sequence[float]) -> "NoiseModel":
        """sigma_i = (sigma / 2) (1 + L_i / L_max): longer links are noisier."""
        lengths = np.asarray(lengths, dtype=float)
        if lengths.size == 0 or np.any(lengths <= 0):
            raise ValueError("Heteroscedastic noise needs positive link lengths")
        sigmas = 0.5 * sigma * (1.0 + lengths / lengths.max())
        return cls("heteroscedastic", float(sigma), sigmas, lengths)

    @classmethod
    def per_link(cls, sigmas: Sequence[float]) -> "NoiseModel":
        sigmas = np.asarray(sigmas, dtype=float)
        return cls("per-link", float(sigmas.max()) if sigmas.size else 0.0, sigmas)

    @classmethod
    def from_topology(cls, topology: "Topology") -> "NoiseModel":
        """Per-link levels from the topology's sigma column."""
        if topology.sigma is None:
            raise ValueError("Topology has no sigma column")
        return cls.per_link(topology.sigma)

    @property
    def m(self) -> int:
        return int(self.sigmas.size)


@dataclass(frozen=True)
class Topology:
    """A CML network: link ids, paths and power-law constants."""
    link_ids: List[str]
    segments: List[LinkSegment]
    a: np.ndarray
    b: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        m = len(self.segments)
        if len(self.link_ids) != m or len(self.a) != m or len(self.b) != m:
            raise ValueError("Topology columns must have equal length")
        if self.sigma is not None and len(self.sigma) != m:
            raise ValueError("Topology sigma column must match the number of links")
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.segments])

    def params(self) -> List[PowerLawParams]:
        return [PowerLawParams(float(a), float(b)) for a, b in zip(self.a, self.b)]


@dataclass(frozen=True)
class Observation:
    """Measured attenuations (dB), one per link."""
    y: np.ndarray
    link_ids: Optional[List[str]] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float, copy=True).ravel()
        if not np.all(np.isfinite(y)):
            raise ValueError("Observation entries must be finite")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


class ObservationModel:
    """
    Stacked link operator M with its noise model.

    Args:
        grid: Grid the weights were traced on
        weights: Per-link intersection lengths
        params: Per-link power-law constants
        noise: Noise model with one sigma per link
        segments: Optional link paths (needed by the VRG baselines)
    """

    def __init__(self, grid: GridSpec, weights: Sequence[LinkWeights],
                 params: Sequence[PowerLawParams], noise: NoiseModel,
                 segments: Optional[Sequence[LinkSegment]] = None):
        m = len(weights)
        if m < 1:
            raise ValueError("Observation model needs at least one link")
        if len(params) != m or noise.m != m:
            raise ValueError("Weights, power-law parameters and noise levels must have equal length")
        if segments is not None and len(segments) != m:
            raise ValueError("Segments must match the number of links")
        self.grid = grid
        self.weights = list(weights)
        self.params = list(params)
        self.noise = noise
        self.segments = list(segments) if segments is not None else None

        self.a = np.array([p.a for p in self.params])
        self.b = np.array([p.b for p in self.params])
        self._link = np.concatenate([np.full(w.nnz, i) for i, w in enumerate(self.weights)])
        self._cell = np.concatenate([w.cells() for w in self.weights]).astype(int)
        self._delta = np.concatenate([w.values for w in self.weights])
        nnz = self._delta.size
        # entry -> link and entry -> cell summation operators
        self._gather = sparse.csr_matrix((np.ones(nnz), (self._link, np.arange(nnz))), shape=(m, nnz))
        self._scatter = sparse.csr_matrix((np.ones(nnz), (self._cell, np.arange(nnz))),
                                          shape=(grid.size, nnz))

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def sigmas(self) -> np.ndarray:
        return self.noise.sigmas

    @property
    def inside_lengths(self) -> np.ndarray:
        return np.array([w.total_inside for w in self.weights])

    def with_noise(self, noise: NoiseModel) -> "ObservationModel":
        return ObservationModel(self.grid, self.weights, self.params, noise, self.segments)

    def with_linear_operator(self) -> "ObservationModel":
        """Same links with every exponent b_i set to 1."""
        params = [PowerLawParams(p.a, 1.0) for p in self.params]
        return ObservationModel(self.grid, self.weights, params, self.noise, self.segments)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """
        Evaluate M on flat states of shape (n,) or (B, n).

        Negative entries (diffusion iterates) are clamped at zero before the power.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        base = np.maximum(x2[:, self._cell], 0.0)
        contrib = self.a[self._link] * self._delta * base ** self.b[self._link]
        out = np.asarray((self._gather @ contrib.T).T)
        return out[0] if single else out

    def pullback(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """
        Return sum_i w_i dM_i/dx for flat states x (n,) or (B, n) and link weights w (m,) or (B, m).

        The derivative of x^b uses max(x, GRAD_EPS)^(b-1) when b < 1 or x <= 0.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        w2 = np.atleast_2d(np.asarray(w, dtype=float))
        b = self.b[self._link]
        xe = x2[:, self._cell]
        floor = (b < 1.0) | (xe <= 0.0)
        base = np.where(floor, np.maximum(xe, GRAD_EPS), xe)
        entries = w2[:, self._link] * self.a[self._link] * self._delta * b * base ** (b - 1.0)
        out = np.asarray((self._scatter @ entries.T).T)
        return out[0] if single else out

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        """Linear adjoint sum_i v_i a_i Delta^i (exact for b = 1)."""
        v = np.asarray(v, dtype=float)
        entries = v[..., self._link] * self.a[self._link] * self._delta
        out = np.asarray((self._scatter @ np.atleast_2d(entries).T).T)
        return out[0] if v.ndim == 1 else out


def build_observation_model(grid: GridSpec, topology: Topology,
                            noise: Optional[NoiseModel] = None) -> ObservationModel:
    """Trace a topology and assemble its observation model (noise defaults to the topology's sigma column)."""
    weights = build_network_weights(grid, topology.segments)
    if noise is None:
        noise = NoiseModel.from_topology(topology)
    return ObservationModel(grid, weights, topology.params(), noise, topology.segments)


def _check_field(model: ObservationModel, x: RainField) -> np.ndarray:
    if x.grid != model.grid:
        raise GridMismatchError("Field grid does not match the grid the link weights were traced on")
    flat = x.flat()
    if np.any(flat < 0):
        raise NegativeFieldError("Rain field entries must be non-negative")
    return flat


def forward(model: ObservationModel, x: RainField) -> np.ndarray:
    """Noise-free link attenuations M(x)."""
    return model.apply(_check_field(model, x))


def adjoint(model: ObservationModel, v: np.ndarray) -> np.ndarray:
    """Linear adjoint of the operator at b = 1, as an H x W matrix."""
    return model.adjoint(v).reshape(model.grid.shape)


def sample_observation(model: ObservationModel, x: RainField, rng_seed: int) -> Observation:
    """Draw y = M(x) + Sigma z with a seeded standard normal z."""
    clean = forward(model, x)
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(model.m)
    return Observation(clean + model.sigmas * z)


def _check_sigmas(sigmas: np.ndarray):
    if np.any(sigmas <= 0):
        raise DegenerateLikelihoodError("All noise levels must be positive to define a likelihood")


def log_likelihood(model: ObservationModel, x: RainField, y) -> float:
    """
    Exact Gaussian log-density log N(y; M(x), diag(sigma^2)).

    Includes the normalization -sum(log sigma_i) - m/2 log(2 pi).
    """
    _check_sigmas(model.sigmas)
    y = y.y if isinstance(y, Observation) else np.asarray(y, dtype=float)
    r = y - forward(model, x)
    var = model.sigmas ** 2
    return float(-0.5 * np.sum(r ** 2 / var) - 0.5 * np.sum(np.log(var)) - 0.5 * model.m * LOG_2PI)


def grad_log_likelihood(model: ObservationModel, x: RainField, y) -> np.ndarray:
    """Gradient of log_likelihood with respect to the field, as an H x W matrix."""
    _check_sigmas(model.sigmas)
    y = y.y if isinstance(y, Observation) else np.asarray(y, dtype=float)
    flat = _check_field(model, x)
    w = (y - model.apply(flat)) / model.sigmas ** 2
    return model.pullback(flat, w).reshape(model.grid.shape)


class Likelihood(ABC):
    """
    Gaussian likelihood p(y | x0) used by the posterior samplers.

    States are flat vectors of shape (n,) or batches of shape (B, n).
    extra_variance inflates every link variance (intermediate likelihood surrogate).
    """

    def __init__(self, y: np.ndarray, sigmas: np.ndarray):
        self.y = np.asarray(y, dtype=float).ravel()
        self.noise_sigmas = np.asarray(sigmas, dtype=float).ravel()
        if self.y.shape != self.noise_sigmas.shape:
            raise ValueError("Observation vector and noise levels must have equal length")
        _check_sigmas(self.noise_sigmas)

    @property
    def reference_sigma(self) -> float:
        return float(self.noise_sigmas.max())

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        """Noise-free prediction M(x)."""
        pass

    @abstractmethod
    def pullback(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of M at x with link weights w."""
        pass

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.y - self.predict(x)

    def log_density(self, x: np.ndarray, extra_variance: float = 0.0) -> np.ndarray:
        var = self.noise_sigmas ** 2 + extra_variance
        r = self.residual(x)
        return -0.5 * np.sum(r ** 2 / var, axis=-1) - 0.5 * np.sum(np.log(var)) - 0.5 * self.y.size * LOG_2PI

    def gradient(self, x: np.ndarray, extra_variance: float = 0.0) -> np.ndarray:
        var = self.noise_sigmas ** 2 + extra_variance
        return self.pullback(x, self.residual(x) / var)

    def whitened_residual_norm(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.residual(x) / self.noise_sigmas, axis=-1)


class LinkLikelihood(Likelihood):
    """Likelihood of link attenuations under an ObservationModel."""

    def __init__(self, model: ObservationModel, y):
        y = y.y if isinstance(y, Observation) else y
        super().__init__(y, model.sigmas)
        self.model = model

    def predict(self, x):
        return self.model.apply(x)

    def pullback(self, x, w):
        return self.model.pullback(x, w)


class LinearGaussianLikelihood(Likelihood):
    """Likelihood of y = A x + diag(sigma) z for an explicit (m, n) operator."""

    def __init__(self, operator, y, sigmas):
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), np.shape(y))
        super().__init__(y, sigmas)
        self.operator = operator
        if operator.shape[0] != self.y.size:
            raise ValueError("Operator rows must match the observation length")

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray((self.operator @ np.atleast_2d(x).T).T).reshape(x.shape[:-1] + (self.y.size,))

    def pullback(self, x, w):
        w = np.asarray(w, dtype=float)
        out = np.asarray((self.operator.T @ np.atleast_2d(w).T).T)
        return out.reshape(w.shape[:-1] + (self.operator.shape[1],))


class ConstantLikelihood(Likelihood):
    """Uninformative likelihood: constant log-density, zero gradient."""

    def __init__(self, n: int):
        super().__init__(np.zeros(1), np.ones(1))
        self.n = int(n)

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1,))

    def pullback(self, x, w):
        return np.zeros_like(np.asarray(x, dtype=float))

    def log_density(self, x, extra_variance: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def gradient(self, x, extra_variance: float = 0.0):
        return np.zeros_like(np.asarray(x, dtype=float))

    def whitened_residual_norm(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])
