"""
Censored, power-transformed Gaussian-process prior for rain fields.

X(s) = max(0, V(s))^beta with V ~ GP(mu, sigma^2 k_l). Parameters are fitted by
Monte Carlo EM: censored latents are imputed by Gibbs sampling (beta = 1) or
Metropolis-within-Gibbs (beta > 1), and the M-step is a profile Gaussian MLE.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, special
from sklearn.gaussian_process.kernels import RBF

from .geometry import GridSpec
from .gp1d import SingularSystemError

logger = logging.getLogger(__name__)

MAX_CELLS = 4096
KERNEL_JITTER = 1e-8
BURN_IN_FRACTION = 0.5


class FitError(ValueError):
    """Raised for unusable EM inputs."""
    pass


@dataclass(frozen=True)
class CensoredGpParams:
    """
    Args:
        mu: Constant latent mean
        lengthscales: (l1, l2) along x (columns) and y (rows)
        variance: Latent variance sigma^2
        beta: Power of the positive part, >= 1
    """
    mu: float
    lengthscales: Tuple[float, float]
    variance: float
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        if len(self.lengthscales) != 2 or min(self.lengthscales) <= 0:
            raise ValueError("Two positive lengthscales are required")
        if not self.variance > 0:
            raise ValueError("Latent variance must be positive")
        if self.beta < 1:
            raise ValueError("beta must be at least 1")

    def to_dict(self) -> Dict:
        return {"mu": self.mu, "lengthscale_x": self.lengthscales[0], "lengthscale_y": self.lengthscales[1],
                "variance": self.variance, "beta": self.beta}


@dataclass(frozen=True)
class CensoredField:
    """Non-negative field with its censoring mask (True where the value is 0)."""
    values: np.ndarray
    censor_mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if np.any(values < 0):
            raise ValueError("Censored field values must be non-negative")
        mask = values == 0.0
        if self.censor_mask is not None and not np.array_equal(np.asarray(self.censor_mask, dtype=bool), mask):
            raise ValueError("Censor mask must be True exactly where the value is 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "censor_mask", mask)

    @property
    def censored_fraction(self) -> float:
        return float(self.censor_mask.mean())


def _check_size(grid: GridSpec):
    if grid.size > MAX_CELLS:
        raise ValueError(f"Censored GP is limited to {MAX_CELLS} cells (grid has {grid.size})")


def correlation_matrix(lengthscales: Sequence[float], grid: GridSpec) -> np.ndarray:
    """Anisotropic RBF correlation between cell centres."""
    return RBF(length_scale=np.asarray(lengthscales, dtype=float))(grid.cell_centers())


def censored_gp_covariance(params: CensoredGpParams, grid: GridSpec) -> np.ndarray:
    _check_size(grid)
    return params.variance * correlation_matrix(params.lengthscales, grid)


def _cholesky(K: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(K + KERNEL_JITTER * np.eye(K.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("Censored GP covariance is not positive definite") from exc


def sample_censored_field(params: CensoredGpParams, grid: GridSpec, rng) -> CensoredField:
    """Draw V ~ N(mu 1, Gamma) and return max(0, V)^beta."""
    rng = np.random.default_rng(rng)
    L = _cholesky(censored_gp_covariance(params, grid))
    v = params.mu + L @ rng.standard_normal(grid.size)
    x = np.where(v > 0, np.maximum(v, 0.0) ** params.beta, 0.0)
    return CensoredField(x.reshape(grid.shape))


def _truncated_upper(mean: np.ndarray, sd: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of N(mean, sd^2) truncated to (-inf, 0]."""
    b = (0.0 - mean) / sd
    z = special.ndtri_exp(np.log(u) + special.log_ndtr(b))
    return np.minimum(mean + sd * z, 0.0)


def _to_latent(w: np.ndarray, beta: float) -> np.ndarray:
    return np.sign(w) * np.abs(w) ** (1.0 / beta)


@dataclass
class ImputationResult:
    """Kept latent draws (after burn-in) and the final chain state."""
    latent: np.ndarray
    samples: np.ndarray
    acceptance_rate: float


class _Chains:
    """Per-field coordinate-wise samplers sharing one precision matrix."""

    def __init__(self, params: CensoredGpParams, grid: GridSpec, values: np.ndarray, gens):
        self.params = params
        self.gens = gens
        cov = censored_gp_covariance(params, grid) + KERNEL_JITTER * np.eye(grid.size)
        try:
            self.precision = linalg.inv(cov)
        except linalg.LinAlgError as exc:
            raise SingularSystemError("Censored GP covariance is singular") from exc
        self.cond_sd = 1.0 / np.sqrt(np.diag(self.precision))
        self.censored = values == 0.0
        # chain state in the observation-power domain; censored cells start below zero
        self.w = np.where(self.censored, -0.5 * np.sqrt(params.variance), values)
        self.cells = np.flatnonzero(self.censored.any(axis=0))
        self.accepted = 0
        self.proposed = 0

    def _cond_mean(self, d: np.ndarray, k: int) -> np.ndarray:
        P = self.precision
        return self.params.mu - (d @ P[:, k] - P[k, k] * d[:, k]) / P[k, k]

    def sweep(self, mwg: bool):
        beta = self.params.beta
        u = np.stack([g.random(self.w.shape[1]) for g in self.gens])
        u = np.clip(u, np.finfo(float).tiny, 1.0)
        mu = self.params.mu
        for k in self.cells:
            rows = np.flatnonzero(self.censored[:, k])
            sd = self.cond_sd[k]
            d_w = self.w[rows] - mu
            m_w = self._cond_mean(d_w, k)
            proposal = _truncated_upper(m_w, sd, u[rows, k])
            if not mwg or beta == 1.0:
                self.w[rows, k] = proposal
                continue
            d_v = _to_latent(self.w[rows], beta) - mu
            m_v = self._cond_mean(d_v, k)
            current = self.w[rows, k]
            log_alpha = (self._log_target(proposal, m_v, sd) - self._log_target(current, m_v, sd)
                         - (-(proposal - m_w) ** 2 + (current - m_w) ** 2) / (2.0 * sd ** 2))
            accept = np.ones(rows.size, dtype=bool)
            for j, row in enumerate(rows):
                if log_alpha[j] < 0:
                    accept[j] = np.log(self.gens[row].random()) < log_alpha[j]
            self.w[rows[accept], k] = proposal[accept]
            self.accepted += int(accept.sum())
            self.proposed += rows.size

    def _log_target(self, w: np.ndarray, m_v: np.ndarray, sd: float) -> np.ndarray:
        beta = self.params.beta
        v = _to_latent(w, beta)
        jac = np.log(1.0 / beta) + (1.0 / beta - 1.0) * np.log(np.maximum(np.abs(w), np.finfo(float).tiny))
        return -(v - m_v) ** 2 / (2.0 * sd ** 2) + jac

    def latent(self) -> np.ndarray:
        return _to_latent(self.w, self.params.beta)


def impute_fields(params: CensoredGpParams, grid: GridSpec, values: np.ndarray, n_sweeps: int,
                  gens, mwg: bool = False, burn_in: float = BURN_IN_FRACTION) -> ImputationResult:
    """
    Run one chain per field for n_sweeps sweeps.

    Args:
        values: (F, HW) observed fields in the rain-rate domain
        gens: One numpy Generator per field

    Returns:
        ImputationResult with latent draws kept after the burn-in fraction
    """
    _check_size(grid)
    if n_sweeps < 1:
        raise ValueError("n_sweeps must be at least 1")
    chains = _Chains(params, grid, np.asarray(values, dtype=float), gens)
    keep_from = int(np.floor(burn_in * n_sweeps))
    kept = []
    for s in range(n_sweeps):
        chains.sweep(mwg)
        if s >= keep_from:
            kept.append(chains.latent())
    rate = chains.accepted / chains.proposed if chains.proposed else 1.0
    if mwg:
        logger.debug("Metropolis-within-Gibbs acceptance rate %.3f", rate)
    return ImputationResult(latent=chains.latent(), samples=np.stack(kept, axis=1), acceptance_rate=rate)


def _grid_of(field_: CensoredField) -> GridSpec:
    return GridSpec(*field_.values.shape)


def gibbs_impute(params: CensoredGpParams, field_: CensoredField, n_sweeps: int, rng,
                 grid: Optional[GridSpec] = None) -> np.ndarray:
    """Impute censored latents for beta = 1; observed cells stay fixed."""
    if params.beta != 1.0:
        raise ValueError("gibbs_impute requires beta = 1; use mwg_impute")
    grid = grid or _grid_of(field_)
    res = impute_fields(params, grid, field_.values.reshape(1, -1), n_sweeps, [np.random.default_rng(rng)])
    return res.latent[0].reshape(field_.values.shape)


def mwg_impute(params: CensoredGpParams, field_: CensoredField, n_sweeps: int, rng,
               grid: Optional[GridSpec] = None) -> Tuple[np.ndarray, float]:
    """
    Metropolis-within-Gibbs imputation for beta >= 1.

    Returns:
        (latent matrix, acceptance rate)
    """
    grid = grid or _grid_of(field_)
    res = impute_fields(params, grid, field_.values.reshape(1, -1), n_sweeps, [np.random.default_rng(rng)],
                        mwg=True)
    logger.info("MWG acceptance rate: %.3f", res.acceptance_rate)
    return res.latent[0].reshape(field_.values.shape), res.acceptance_rate


def profile_mle(latents: np.ndarray, R: np.ndarray) -> Tuple[float, float, float]:
    """
    Closed-form mu and sigma^2 for correlation R, and the profile log-likelihood.

    Args:
        latents: (S, n) latent vectors
    """
    S, n = latents.shape
    try:
        c = linalg.cho_factor(R + KERNEL_JITTER * np.eye(n), lower=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("Correlation matrix is not positive definite") from exc
    ones = np.ones(n)
    Ri1 = linalg.cho_solve(c, ones)
    RiV = linalg.cho_solve(c, latents.T)
    mu = float(np.sum(RiV.T @ ones) / (S * ones @ Ri1))
    resid = latents - mu
    quad = np.sum(resid.T * linalg.cho_solve(c, resid.T))
    var = float(quad / (S * n))
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    loglik = -0.5 * S * n * (np.log(2.0 * np.pi * var) + 1.0) - 0.5 * S * logdet
    return mu, var, float(loglik)


def m_step(latents: np.ndarray, grid: GridSpec, start: Sequence[float], beta: float,
           n_restarts: int = 3) -> Tuple[CensoredGpParams, float]:
    """Maximize the profile likelihood over log-lengthscales with L-BFGS-B restarts."""
    lo, hi = np.log(0.1), np.log(4.0 * max(grid.height, grid.width))
    rejected = [0]

    def objective(theta):
        try:
            _, var, ll = profile_mle(latents, correlation_matrix(np.exp(theta), grid))
        except SingularSystemError:
            rejected[0] += 1
            return 1e300
        if not var > 0:
            return 1e300
        return -ll / latents.size

    starts = [np.log(np.clip(start, 0.1, np.exp(hi)))]
    starts.append(np.log([1.0, 1.0]))
    starts.append(np.log([grid.width / 2.0, grid.height / 2.0]))
    best = None
    for x0 in starts[:max(1, n_restarts)]:
        res = optimize.minimize(objective, x0, method="L-BFGS-B", bounds=[(lo, hi), (lo, hi)])
        if best is None or res.fun < best.fun:
            best = res
    if rejected[0]:
        logger.warning("M-step rejected %d non-PSD kernel points", rejected[0])
    ls = np.exp(best.x)
    mu, var, ll = profile_mle(latents, correlation_matrix(ls, grid))
    return CensoredGpParams(mu, tuple(ls), var, beta), ll


def positive_part_score(params: CensoredGpParams, fields: Sequence[CensoredField]) -> float:
    """
    Mean per-field marginal pseudo-log-likelihood in the rain-rate domain.

    Positive cells use p_V(x^(1/beta)) (1/beta) x^(1/beta - 1); censored cells use P(V <= 0).
    """
    sd = np.sqrt(params.variance)
    beta = params.beta
    total = 0.0
    for f in fields:
        x = f.values[~f.censor_mask]
        v = x ** (1.0 / beta)
        log_pos = (-0.5 * ((v - params.mu) / sd) ** 2 - np.log(sd * np.sqrt(2.0 * np.pi))
                   + np.log(1.0 / beta) + (1.0 / beta - 1.0) * np.log(x))
        log_zero = special.log_ndtr((0.0 - params.mu) / sd)
        total += float(np.sum(log_pos) + f.censor_mask.sum() * log_zero)
    return total / len(fields)


@dataclass
class FitReport:
    """Per-beta traces of the EM fit."""
    selected_beta: float = 1.0
    scores: Dict[float, float] = field(default_factory=dict)
    traces: Dict[float, List[Dict]] = field(default_factory=dict)
    acceptance: Dict[float, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"selected_beta": self.selected_beta,
                "scores": {str(b): s for b, s in self.scores.items()},
                "traces": {str(b): t for b, t in self.traces.items()},
                "acceptance": {str(b): a for b, a in self.acceptance.items()}}


def _initial_params(values: np.ndarray, beta: float, grid: GridSpec) -> CensoredGpParams:
    v = values ** (1.0 / beta)
    var = float(v.var()) if v.var() > 0 else 1.0
    return CensoredGpParams(float(v.mean()), (max(grid.width / 4.0, 1.0), max(grid.height / 4.0, 1.0)), var, beta)


def em_fit(fields: Sequence[CensoredField], beta_grid: Sequence[float] = (1.0,), em_iters: int = 10,
           gibbs_sweeps: int = 20, rng=0, holdout_fraction: float = 0.2) -> Tuple[CensoredGpParams, FitReport]:
    """
    Fit (mu, l1, l2, sigma^2) for every beta in beta_grid and select beta.

    E-step: impute censored latents (Gibbs for beta = 1, MWG otherwise), keeping
    the draws after a 50% burn-in. M-step: profile Gaussian MLE. The selected beta
    maximizes positive_part_score on held-out fields.

    Args:
        fields: Observed fields sharing one grid
        beta_grid: Candidate powers (each >= 1)
        em_iters: EM iterations per beta
        gibbs_sweeps: Sweeps per E-step
        rng: Seed
        holdout_fraction: Share of fields held out for beta selection

    Returns:
        (selected parameters, FitReport)
    """
    fields = list(fields)
    if not fields:
        raise FitError("em_fit needs at least one field")
    shape = fields[0].values.shape
    if any(f.values.shape != shape for f in fields):
        raise FitError("All fields must share one grid")
    if not beta_grid:
        raise FitError("beta_grid must not be empty")
    grid = GridSpec(*shape)
    _check_size(grid)

    n_hold = int(round(holdout_fraction * len(fields))) if len(fields) > 1 else 0
    train = fields[:len(fields) - n_hold] if n_hold else fields
    held = fields[len(fields) - n_hold:] if n_hold else fields
    values = np.stack([f.values.ravel() for f in train])

    report = FitReport()
    fitted = {}
    seq = np.random.SeedSequence(rng)
    for beta, beta_seq in zip(beta_grid, seq.spawn(len(beta_grid))):
        beta = float(beta)
        gens = [np.random.default_rng(s) for s in beta_seq.spawn(len(train))]
        params = _initial_params(values, beta, grid)
        fully_observed = not np.any(values == 0.0)
        trace, rates = [], []
        for it in range(em_iters):
            if fully_observed:
                latents = values ** (1.0 / beta)
                rate = 1.0
            else:
                res = impute_fields(params, grid, values, gibbs_sweeps, gens, mwg=beta != 1.0)
                latents = res.samples.reshape(-1, grid.size)
                rate = res.acceptance_rate
            params, ll = m_step(latents, grid, params.lengthscales, beta)
            trace.append({"iteration": it, "loglik": ll, **params.to_dict()})
            rates.append(rate)
            logger.info("beta=%.2f EM iter %d: mu=%.3f l=(%.2f, %.2f) var=%.3f",
                        beta, it, params.mu, *params.lengthscales, params.variance)
        fitted[beta] = params
        report.traces[beta] = trace
        report.acceptance[beta] = rates
        report.scores[beta] = positive_part_score(params, held)

    report.selected_beta = max(report.scores, key=report.scores.get)
    return fitted[report.selected_beta], report
