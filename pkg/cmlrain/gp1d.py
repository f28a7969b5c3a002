"""
1-D Gaussian-process benchmark: RBF prior, interval-integral observations and
the closed-form posterior used as ground truth.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special
from sklearn.gaussian_process.kernels import RBF

logger = logging.getLogger(__name__)

PRIOR_JITTER = 1e-10
DEFAULT_DOMAIN = (-5.0, 5.0)


class SingularSystemError(RuntimeError):
    """Raised when a covariance or kriging system cannot be factorized."""
    pass


@dataclass(frozen=True)
class RbfKernel1D:
    """k(s, s') = variance * exp(-(s - s')^2 / (2 l^2))."""
    lengthscale: float
    variance: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError("Kernel lengthscale must be positive")
        if not self.variance > 0:
            raise ValueError("Kernel variance must be positive")

    def __call__(self, s, t=None) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(-1, 1)
        t = s if t is None else np.asarray(t, dtype=float).reshape(-1, 1)
        return self.variance * RBF(length_scale=self.lengthscale)(s, t)


@dataclass(frozen=True)
class IntervalSet:
    """Integration windows [a_i, b_i] with a shared noise level."""
    intervals: np.ndarray
    noise_sigma: float
    domain: Tuple[float, float] = DEFAULT_DOMAIN

    def __post_init__(self):
        iv = np.array(self.intervals, dtype=float, copy=True).reshape(-1, 2)
        if np.any(iv[:, 0] > iv[:, 1]):
            raise ValueError("Each interval must satisfy a <= b")
        lo, hi = self.domain
        if np.any(iv < lo) or np.any(iv > hi):
            raise ValueError(f"Intervals must lie within the domain [{lo}, {hi}]")
        if self.noise_sigma < 0:
            raise ValueError("Noise sigma must be non-negative")
        iv.setflags(write=False)
        object.__setattr__(self, "intervals", iv)

    def __len__(self) -> int:
        return len(self.intervals)


@dataclass(frozen=True)
class OraclePosterior1D:
    """Exact Gaussian posterior evaluated on a grid."""
    grid: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def quantile(self, q: float) -> np.ndarray:
        """Pointwise Gaussian quantile mean + z_q std."""
        return self.mean + special.ndtri(q) * self.std


def kernel_interval_integral(kernel: RbfKernel1D, interval: Sequence[float], s) -> np.ndarray:
    """
    Closed-form integral of k(s, s') over s' in [a, b].

    Args:
        kernel: RBF kernel
        interval: (a, b)
        s: Evaluation point(s)

    Returns:
        l sqrt(pi/2) [erf((b - s)/(sqrt(2) l)) - erf((a - s)/(sqrt(2) l))], times the kernel variance
    """
    a, b = interval
    ell = kernel.lengthscale
    s = np.asarray(s, dtype=float)
    scale = np.sqrt(2.0) * ell
    return kernel.variance * ell * np.sqrt(np.pi / 2.0) * (
        special.erf((b - s) / scale) - special.erf((a - s) / scale))


def _primitive(z, ell):
    # antiderivative of erf(z / (sqrt(2) l))
    return z * special.erf(z / (np.sqrt(2.0) * ell)) + np.sqrt(2.0 / np.pi) * ell * np.exp(-z ** 2 / (2.0 * ell ** 2))


def kernel_double_integral(kernel: RbfKernel1D, first: Sequence[float], second: Sequence[float]) -> float:
    """Double integral of k over [a_i, b_i] x [a_j, b_j]."""
    ai, bi = first
    aj, bj = second
    ell = kernel.lengthscale
    h = _primitive(bi - aj, ell) - _primitive(ai - aj, ell) - _primitive(bi - bj, ell) + _primitive(ai - bj, ell)
    return float(kernel.variance * ell * np.sqrt(np.pi / 2.0) * h)


def interval_covariance(kernel: RbfKernel1D, intervals: IntervalSet) -> np.ndarray:
    """Noise-free covariance K_yy of the interval integrals."""
    iv = intervals.intervals
    m = len(iv)
    K = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            K[i, j] = K[j, i] = kernel_double_integral(kernel, iv[i], iv[j])
    return K


def cross_covariance(kernel: RbfKernel1D, intervals: IntervalSet, grid) -> np.ndarray:
    """(n, m) matrix of k_y(s) for every grid point s."""
    grid = np.asarray(grid, dtype=float)
    return np.column_stack([kernel_interval_integral(kernel, iv, grid) for iv in intervals.intervals])


def prior_covariance_1d(kernel: RbfKernel1D, grid) -> np.ndarray:
    return kernel(grid)


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(f"{what} is not positive definite") from exc


def oracle_posterior(kernel: RbfKernel1D, intervals: IntervalSet, y, grid) -> OraclePosterior1D:
    """
    Exact posterior of the zero-mean GP given noisy interval integrals.

    mean(s) = k_y(s)^T (K_yy + sigma^2 I)^-1 y
    cov(s, s') = k(s, s') - k_y(s)^T (K_yy + sigma^2 I)^-1 k_y(s')
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != len(intervals):
        raise ValueError(f"Expected {len(intervals)} observations, got {y.size}")
    grid = np.asarray(grid, dtype=float)
    Kyy = interval_covariance(kernel, intervals) + intervals.noise_sigma ** 2 * np.eye(len(intervals))
    factor = _cholesky(Kyy, "Interval covariance K_yy + sigma^2 I")
    Ky = cross_covariance(kernel, intervals, grid)
    mean = Ky @ linalg.cho_solve(factor, y)
    cov = prior_covariance_1d(kernel, grid) - Ky @ linalg.cho_solve(factor, Ky.T)
    cov = 0.5 * (cov + cov.T)
    return OraclePosterior1D(grid=grid, mean=mean, cov=cov)


def sample_prior_1d(kernel: RbfKernel1D, grid, rng_seed: int) -> np.ndarray:
    """Exact draw from N(0, K + 1e-10 I) on the grid."""
    grid = np.asarray(grid, dtype=float)
    K = prior_covariance_1d(kernel, grid) + PRIOR_JITTER * np.eye(grid.size)
    L, _ = _cholesky(K, "Prior covariance")
    z = np.random.default_rng(rng_seed).standard_normal(grid.size)
    return np.tril(L) @ z


def oracle_draws(posterior: OraclePosterior1D, n: int, seed: int) -> np.ndarray:
    """n exact draws from the oracle posterior, shape (n, grid size)."""
    evals, evecs = linalg.eigh(posterior.cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = np.random.default_rng(seed).standard_normal((n, posterior.grid.size))
    return posterior.mean + z @ root.T


def interval_operator(grid, intervals: IntervalSet) -> np.ndarray:
    """
    (m, n) matrix integrating the piecewise-linear interpolant of grid values over each interval.

    Parts of an interval outside the grid span contribute nothing.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("Grid points must be strictly increasing")
    A = np.zeros((len(intervals), grid.size))
    for i, (a, b) in enumerate(intervals.intervals):
        for j in range(grid.size - 1):
            g0, g1 = grid[j], grid[j + 1]
            lo, hi = max(a, g0), min(b, g1)
            if hi <= lo:
                continue
            h = g1 - g0
            mean_lam = 0.5 * ((lo - g0) + (hi - g0)) / h
            A[i, j] += (hi - lo) * (1.0 - mean_lam)
            A[i, j + 1] += (hi - lo) * mean_lam
    return A


def default_grid(n: int = 50, domain: Tuple[float, float] = DEFAULT_DOMAIN) -> np.ndarray:
    return np.linspace(domain[0], domain[1], n)


def default_intervals(m: int = 8, length_range: Tuple[float, float] = (0.8, 2.0), seed: int = 0,
                      domain: Tuple[float, float] = DEFAULT_DOMAIN, max_tries: int = 10000) -> np.ndarray:
    """
    Seeded layout of m non-overlapping intervals with lengths in length_range.

    Lengths are redrawn until they fit in the domain; the free space is split
    into m + 1 random gaps.
    """
    lo, hi = domain
    width = hi - lo
    lmin, lmax = length_range
    if m < 1 or lmin <= 0 or lmax < lmin:
        raise ValueError("Need m >= 1 and 0 < min length <= max length")
    if m * lmin > width:
        raise ValueError(f"{m} intervals of length >= {lmin} do not fit in a domain of width {width}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        lengths = rng.uniform(lmin, lmax, size=m)
        if lengths.sum() <= width:
            break
    else:
        lengths = np.full(m, lmin)
    gaps = rng.dirichlet(np.ones(m + 1)) * (width - lengths.sum())
    starts = lo + np.cumsum(gaps[:-1]) + np.concatenate([[0.0], np.cumsum(lengths[:-1])])
    ends = np.minimum(starts + lengths, hi)
    return np.column_stack([starts, ends])


@dataclass
class Gp1dProblem:
    """A seeded instance of the 1-D benchmark."""
    kernel: RbfKernel1D
    grid: np.ndarray
    intervals: IntervalSet
    truth: np.ndarray
    y: np.ndarray

    @property
    def operator(self) -> np.ndarray:
        return interval_operator(self.grid, self.intervals)

    def oracle(self) -> OraclePosterior1D:
        return oracle_posterior(self.kernel, self.intervals, self.y, self.grid)

    def prior_covariance(self) -> np.ndarray:
        return prior_covariance_1d(self.kernel, self.grid)

    def to_dict(self) -> dict:
        return {
            "lengthscale": self.kernel.lengthscale,
            "grid_n": int(self.grid.size),
            "intervals": self.intervals.intervals.tolist(),
            "sigma": self.intervals.noise_sigma,
        }


def build_gp1d_problem(lengthscale: float = 0.6, grid_n: int = 50, sigma: float = 0.1, seed: int = 0,
                       intervals: Optional[Sequence[Sequence[float]]] = None, n_intervals: int = 8,
                       length_range: Tuple[float, float] = (0.8, 2.0)) -> Gp1dProblem:
    """
    Draw a latent path from the prior and observe its interval integrals with noise.

    The latent path is sampled on the grid and integrated with interval_operator.
    """
    kernel = RbfKernel1D(lengthscale)
    grid = default_grid(grid_n)
    seeds = np.random.SeedSequence(seed).spawn(3)
    if intervals is None:
        intervals = default_intervals(n_intervals, length_range, seed=int(seeds[0].generate_state(1)[0]))
    iv = IntervalSet(np.asarray(intervals, dtype=float), sigma)
    truth = sample_prior_1d(kernel, grid, int(seeds[1].generate_state(1)[0]))
    noise = np.random.default_rng(seeds[2]).standard_normal(len(iv))
    y = interval_operator(grid, iv) @ truth + sigma * noise
    logger.info("Built 1-D benchmark: %d intervals, sigma=%.3g, lengthscale=%.3g", len(iv), sigma, lengthscale)
    return Gp1dProblem(kernel=kernel, grid=grid, intervals=iv, truth=truth, y=y)
