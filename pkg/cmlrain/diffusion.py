"""
Variance-exploding diffusion: noise schedules, bridge kernels, denoisers and
unconditional ancestral sampling.

States are corrupted as x_t = x_0 + sigma_t eps. Batches are arrays of shape (B, n).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Increasing noise ladder 0 = sigma_0 < sigma_1 < ... < sigma_T."""
    sigmas: np.ndarray
    rho: float
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        sigmas = np.array(self.sigmas, dtype=float, copy=True)
        if sigmas.ndim != 1 or sigmas.size < 2 or sigmas[0] != 0.0:
            raise ValueError("Schedule must start at sigma_0 = 0 and have at least one positive level")
        if np.any(np.diff(sigmas) <= 0):
            raise ValueError("Schedule levels must be strictly increasing")
        sigmas.setflags(write=False)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def T(self) -> int:
        return self.sigmas.size - 1

    def gamma(self, l: int, t: int) -> float:
        """Bridge mixing weight sigma_l^2 / sigma_t^2."""
        return float(self.sigmas[l] ** 2 / self.sigmas[t] ** 2)


def karras_schedule(T: int, sigma_min: float = 2e-3, sigma_max: float = 100.0, rho: float = 7.0) -> NoiseSchedule:
    """
    Karras ladder with T positive levels in increasing order and sigma_0 = 0 prepended.

    Args:
        T: Number of positive levels
        sigma_min: Smallest positive level (sigma_1)
        sigma_max: Largest level (sigma_T)
        rho: Curvature of the ladder

    Returns:
        NoiseSchedule with exact endpoints
    """
    if T < 1:
        raise ValueError("Schedule needs T >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("Need 0 < sigma_min < sigma_max")
    if not rho > 0:
        raise ValueError("rho must be positive")
    if T == 1:
        levels = np.array([sigma_max])
    else:
        i = np.arange(T)
        lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
        levels = (hi + (1.0 - i / (T - 1)) * (lo - hi)) ** rho
        levels[0], levels[-1] = sigma_min, sigma_max
    return NoiseSchedule(np.concatenate([[0.0], levels]), rho, sigma_min, sigma_max)


def member_generators(seed: int, k: int) -> List[np.random.Generator]:
    """Independent per-member streams; member i's stream does not depend on k."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def standard_normal_rows(gens: List[np.random.Generator], n: int) -> np.ndarray:
    return np.stack([g.standard_normal(n) for g in gens])


def bridge_mean_std(schedule: NoiseSchedule, l: int, t: int, x0_hat, x_t):
    if not 0 <= l < t <= schedule.T:
        raise ValueError(f"Bridge needs 0 <= l < t <= T (got l={l}, t={t})")
    gamma = schedule.gamma(l, t)
    mean = gamma * np.asarray(x_t) + (1.0 - gamma) * np.asarray(x0_hat)
    std = np.sqrt(schedule.sigmas[l] ** 2 * (1.0 - gamma))
    return mean, std


def bridge_sample(schedule: NoiseSchedule, l: int, t: int, x0_hat, x_t, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(gamma x_t + (1 - gamma) x0_hat, sigma_l^2 (1 - gamma) I), gamma = sigma_l^2 / sigma_t^2."""
    mean, std = bridge_mean_std(schedule, l, t, x0_hat, x_t)
    if std == 0.0:
        return np.array(mean, dtype=float)
    return mean + std * rng.standard_normal(np.shape(mean))


def _reverse_step(schedule: NoiseSchedule, t: int, x_t: np.ndarray, x0: np.ndarray, noise: np.ndarray) -> np.ndarray:
    mean, std = bridge_mean_std(schedule, t - 1, t, x0, x_t)
    return mean + std * noise


class Denoiser(ABC):
    """Posterior-mean predictor D(sigma, x) ~ E[x_0 | x_t = x]."""

    exact_jacobian = False

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def __call__(self, sigma: float, x: np.ndarray) -> np.ndarray:
        pass

    def vjp(self, sigma: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """v^T dD/dx. The default treats the Jacobian as the identity."""
        return np.asarray(v, dtype=float)


class GaussianDenoiser(Denoiser):
    """
    Exact denoiser of the prior N(mean, covariance).

    The covariance is eigendecomposed once, so D(sigma, x) = mu + U diag(l / (l + sigma^2)) U^T (x - mu).

    Args:
        mean: Prior mean (n,)
        covariance: Prior covariance (n, n), symmetric PSD
        nonnegative: Apply a ReLU to the output (rain-field contract)
    """

    exact_jacobian = True

    def __init__(self, mean: np.ndarray, covariance: np.ndarray, nonnegative: bool = False):
        mean = np.asarray(mean, dtype=float).ravel()
        covariance = np.asarray(covariance, dtype=float)
        if covariance.shape != (mean.size, mean.size):
            raise ValueError("Covariance must be an n x n matrix matching the mean")
        if not np.allclose(covariance, covariance.T, atol=1e-10):
            raise ValueError("Covariance must be symmetric")
        evals, evecs = linalg.eigh(covariance)
        if evals.min() < -1e-8 * max(1.0, abs(evals.max())):
            raise ValueError("Covariance must be positive semi-definite")
        self.mean = mean
        self.covariance = covariance
        self.nonnegative = nonnegative
        self._evals = np.clip(evals, 0.0, None)
        self._evecs = evecs

    @property
    def dim(self) -> int:
        return self.mean.size

    def _shrink(self, sigma: float, v: np.ndarray) -> np.ndarray:
        # U diag(f) U^T v for f = l / (l + sigma^2)
        factor = self._evals / (self._evals + sigma ** 2)
        return ((v @ self._evecs) * factor) @ self._evecs.T

    def _linear(self, sigma: float, x: np.ndarray) -> np.ndarray:
        if sigma == 0.0:
            return np.array(x, dtype=float)
        return self.mean + self._shrink(sigma, x - self.mean)

    def __call__(self, sigma, x):
        out = self._linear(sigma, np.asarray(x, dtype=float))
        return np.maximum(out, 0.0) if self.nonnegative else out

    def vjp(self, sigma, x, v):
        v = np.asarray(v, dtype=float)
        if self.nonnegative:
            v = v * (self._linear(sigma, np.asarray(x, dtype=float)) > 0.0)
        if sigma == 0.0:
            return v
        return self._shrink(sigma, v)

    def score(self, sigma: float, x: np.ndarray) -> np.ndarray:
        """grad log p_sigma(x) of the corrupted marginal N(mu, Sigma + sigma^2 I)."""
        inv = 1.0 / (self._evals + sigma ** 2)
        return -(((np.asarray(x) - self.mean) @ self._evecs) * inv) @ self._evecs.T

    def log_marginal(self, sigma: float, x: np.ndarray) -> np.ndarray:
        var = self._evals + sigma ** 2
        proj = (np.asarray(x) - self.mean) @ self._evecs
        return -0.5 * np.sum(proj ** 2 / var, axis=-1) - 0.5 * np.sum(np.log(2.0 * np.pi * var))


def gaussian_denoise(den: GaussianDenoiser, sigma_t: float, x: np.ndarray) -> np.ndarray:
    """Exact E[x_0 | x_t = x] = mu + Sigma (Sigma + sigma_t^2 I)^-1 (x - mu)."""
    if sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")
    return den(sigma_t, x)


def ancestral_sample(schedule: NoiseSchedule, den: Denoiser, seed: int, batch: int = 1) -> np.ndarray:
    """
    Unconditional reverse diffusion from x_T ~ N(0, sigma_T^2 I).

    Each step draws from the bridge q(x_{t-1} | D(x_t), x_t); the last step
    returns D(sigma_1, x_1) without adding noise.

    Returns:
        Array of shape (batch, n)
    """
    if batch < 1:
        raise ValueError("Batch size must be at least 1")
    gens = member_generators(seed, batch)
    sig = schedule.sigmas
    x = sig[-1] * standard_normal_rows(gens, den.dim)
    for t in range(schedule.T, 1, -1):
        x0 = den(sig[t], x)
        x = _reverse_step(schedule, t, x, x0, standard_normal_rows(gens, den.dim))
    return den(sig[1], x)
