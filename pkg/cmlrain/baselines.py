"""
Deterministic reconstruction baselines from virtual rain gauges:
inverse distance weighting, the GMZ multi-gauge iteration and ordinary kriging.

All positions are in grid coordinates, so distances are measured in cells.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, ndimage, optimize
from sklearn.metrics import pairwise_distances

from .forward import ObservationModel, PowerLawParams, RainField
from .geometry import GridSpec, LinkSegment
from .gp1d import SingularSystemError

logger = logging.getLogger(__name__)

COINCIDENT_TOL = 1e-10
N_VARIOGRAM_BINS = 15
N_VARIOGRAM_STARTS = 8


@dataclass(frozen=True)
class VirtualGauge:
    """Pseudo point measurement placed on a link path."""
    position: Tuple[float, float]
    value: float
    domain: str = "rain"

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if not np.all(np.isfinite(self.position)):
            raise ValueError("Gauge position must be finite")
        if not self.value >= 0:
            raise ValueError("Gauge value must be non-negative")


@dataclass(frozen=True)
class IdwConfig:
    """
    Args:
        p: Distance power
        roi: Region-of-influence radius (cells)
        eps: Distance floor
    """
    p: float = 2.0
    roi: float = 6.0
    eps: float = 1e-6

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("IDW power p must be positive")
        if not self.roi > 0:
            raise ValueError("IDW roi must be positive")
        if not self.eps > 0:
            raise ValueError("IDW eps must be positive")


@dataclass(frozen=True)
class Variogram:
    """Exponential model gamma(h) = nugget + sill (1 - exp(-h / range))."""
    nugget: float
    sill: float
    range: float
    model: str = "exponential"

    def __post_init__(self):
        if self.model != "exponential":
            raise ValueError(f"Unsupported variogram model: {self.model}")
        if self.nugget < 0 or self.sill < 0 or not self.range > 0:
            raise ValueError("Variogram needs nugget >= 0, sill >= 0 and range > 0")

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.nugget + self.sill * (1.0 - np.exp(-h / self.range))


@dataclass
class KrigingResult:
    """Clamped estimate, kriging variance, raw estimate and per-cell weight sums."""
    field: RainField
    variance: np.ndarray
    raw: np.ndarray
    weight_sums: np.ndarray


def _positions(gauges: Sequence[VirtualGauge]) -> np.ndarray:
    return np.array([g.position for g in gauges], dtype=float).reshape(-1, 2)


def _values(gauges: Sequence[VirtualGauge]) -> np.ndarray:
    return np.array([g.value for g in gauges], dtype=float)


def invert_power_law(attenuation, a, b, length) -> np.ndarray:
    """Path-average rain rate (Y / (a L))^(1/b), clamped at zero."""
    attenuation = np.asarray(attenuation, dtype=float)
    length = np.asarray(length, dtype=float)
    if np.any(length <= 0):
        raise ValueError("Link length inside the grid must be positive")
    return (np.maximum(attenuation, 0.0) / (np.asarray(a) * length)) ** (1.0 / np.asarray(b))


def links_to_midpoint_gauges(links: Sequence[LinkSegment], observations, params: Sequence[PowerLawParams],
                             lengths: Optional[Sequence[float]] = None) -> List[VirtualGauge]:
    """
    One gauge per link at its midpoint, valued by inverting the power law.

    Args:
        links: Link paths
        observations: Attenuations Y_i
        params: Per-link (a, b)
        lengths: Path lengths L_i (defaults to the segment lengths)
    """
    y = np.asarray(getattr(observations, "y", observations), dtype=float)
    if not (len(links) == len(params) == y.size):
        raise ValueError("Links, observations and power-law parameters must have equal length")
    lengths = np.array([s.length for s in links]) if lengths is None else np.asarray(lengths, dtype=float)
    a = np.array([p.a for p in params])
    b = np.array([p.b for p in params])
    rates = invert_power_law(y, a, b, lengths)
    return [VirtualGauge(s.midpoint, float(r)) for s, r in zip(links, rates)]


def gauges_from_model(model: ObservationModel, observations) -> List[VirtualGauge]:
    """Midpoint gauges using the in-grid lengths of the model's links."""
    if model.segments is None:
        raise ValueError("Observation model carries no link segments")
    return links_to_midpoint_gauges(model.segments, observations, model.params, model.inside_lengths)


def idw_weights(positions: np.ndarray, grid: GridSpec, cfg: IdwConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normalized IDW weights of every cell centre.

    Returns:
        (weights (HW, G) with rows summing to 1 where covered, coverage mask (HW,))
    """
    d = pairwise_distances(grid.cell_centers(), np.asarray(positions, dtype=float).reshape(-1, 2))
    w = np.maximum(d, cfg.eps) ** (-cfg.p)
    w[d > cfg.roi] = 0.0
    total = w.sum(axis=1)
    covered = total > 0
    w[covered] /= total[covered, None]
    return w, covered


def idw_interpolate(gauges: Sequence[VirtualGauge], grid: GridSpec, cfg: IdwConfig = IdwConfig(),
                    return_coverage: bool = False):
    """
    Inverse-distance-weighted average of the gauges within roi of each cell.

    Cells with no gauge in range are 0 and flagged in the coverage mask.
    """
    if len(gauges) < 1:
        raise ValueError("IDW needs at least one gauge")
    w, covered = idw_weights(_positions(gauges), grid, cfg)
    values = np.maximum(w @ _values(gauges), 0.0)
    field_ = RainField(values.reshape(grid.shape), grid)
    if return_coverage:
        return field_, covered.reshape(grid.shape)
    return field_


def link_points(segment: LinkSegment, k: int) -> np.ndarray:
    """K points at parameters (j + 1/2) / K along the link."""
    if k < 1:
        raise ValueError("Need at least one point per link")
    return segment.point_at((np.arange(k) + 0.5) / k)


def gmz_virtual_gauges(links: Sequence[LinkSegment], observations, params: Sequence[PowerLawParams],
                       grid: GridSpec, lengths: Optional[Sequence[float]] = None, k_points: int = 5,
                       n_iters: int = 20, idw_cfg: IdwConfig = IdwConfig()) -> List[VirtualGauge]:
    """
    Iteratively redistribute each link's rain over K virtual gauges.

    Each iteration interpolates the gauges with IDW, samples the field bilinearly
    at the link points and rescales the samples in the attenuation domain
    A = a r^b so that their mean equals max(Y, 0) / L.
    """
    y = np.asarray(getattr(observations, "y", observations), dtype=float)
    lengths = np.array([s.length for s in links]) if lengths is None else np.asarray(lengths, dtype=float)
    a = np.array([p.a for p in params])
    b = np.array([p.b for p in params])
    start = invert_power_law(y, a, b, lengths)
    target = np.maximum(y, 0.0) / lengths

    points = [link_points(s, k_points) for s in links]
    rates = [np.full(k_points, r) for r in start]
    all_points = np.concatenate(points)
    coords = grid.to_index_coords(all_points).T

    for it in range(n_iters):
        gauges = [VirtualGauge(p, r) for pts, rs in zip(points, rates) for p, r in zip(pts, rs)]
        field_ = idw_interpolate(gauges, grid, idw_cfg)
        sampled = ndimage.map_coordinates(field_.values, coords, order=1, mode="nearest")
        sampled = np.maximum(sampled, 0.0).reshape(len(links), k_points)
        new_rates = []
        for i in range(len(links)):
            atten = a[i] * sampled[i] ** b[i]
            mean = atten.mean()
            if mean > 0:
                atten = atten * (target[i] / mean)
            else:
                atten = np.full(k_points, target[i])
            new_rates.append((atten / a[i]) ** (1.0 / b[i]))
        rates = new_rates
        logger.debug("GMZ iteration %d done", it)

    return [VirtualGauge(p, float(r)) for pts, rs in zip(points, rates) for p, r in zip(pts, rs)]


def gmz_reconstruct(links: Sequence[LinkSegment], observations, params: Sequence[PowerLawParams],
                    grid: GridSpec, lengths: Optional[Sequence[float]] = None, k_points: int = 5,
                    n_iters: int = 20, idw_cfg: IdwConfig = IdwConfig()) -> RainField:
    gauges = gmz_virtual_gauges(links, observations, params, grid, lengths, k_points, n_iters, idw_cfg)
    return idw_interpolate(gauges, grid, idw_cfg)


def empirical_variogram(gauges: Sequence[VirtualGauge], n_bins: int = N_VARIOGRAM_BINS):
    """Binned semivariances up to half the diagonal of the gauge bounding box."""
    pos = _positions(gauges)
    z = _values(gauges)
    d = pairwise_distances(pos)
    iu = np.triu_indices(len(z), k=1)
    lags = d[iu]
    semivar = 0.5 * (z[iu[0]] - z[iu[1]]) ** 2
    span = pos.max(axis=0) - pos.min(axis=0)
    max_lag = 0.5 * float(np.hypot(*span))
    if max_lag <= 0:
        raise ValueError("Gauges must not all share one position")
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    centers, gammas = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (lags > lo) & (lags <= hi)
        if sel.any():
            centers.append(lags[sel].mean())
            gammas.append(semivar[sel].mean())
    return np.array(centers), np.array(gammas), max_lag


def fit_variogram_l1(gauges: Sequence[VirtualGauge], n_bins: int = N_VARIOGRAM_BINS,
                     n_starts: int = N_VARIOGRAM_STARTS) -> Variogram:
    """
    Fit the exponential variogram to binned semivariances.

    Robust (soft-L1) bounded least squares from n_starts initial ranges; the
    start with the smallest absolute misfit wins.
    """
    if len(gauges) < 3:
        raise ValueError("Variogram fitting needs at least 3 gauges")
    z = _values(gauges)
    lags, gammas, max_lag = empirical_variogram(gauges, n_bins)
    if np.all(z == z[0]) or gammas.size == 0 or np.all(gammas == 0):
        return Variogram(0.0, 0.0, max_lag)

    g_max = float(gammas.max())

    def residual(theta):
        nugget, sill, rng = theta
        return nugget + sill * (1.0 - np.exp(-lags / rng)) - gammas

    lower = [0.0, 0.0, 1e-3 * max_lag]
    upper = [g_max, 2.0 * g_max, 3.0 * max_lag]
    best, best_l1 = None, np.inf
    for r0 in np.linspace(0.1, 1.5, n_starts) * max_lag:
        x0 = [min(float(gammas.min()), 0.5 * g_max), 0.5 * g_max + 0.5 * (g_max - float(gammas.min())), r0]
        x0 = np.clip(x0, lower, upper)
        res = optimize.least_squares(residual, x0, bounds=(lower, upper), loss="soft_l1")
        l1 = float(np.abs(residual(res.x)).sum())
        if l1 < best_l1:
            best, best_l1 = res.x, l1
    nugget, sill, rng = best
    return Variogram(float(nugget), float(sill), float(rng))


def _kriging_matrix(pos: np.ndarray, variogram: Variogram, jitter: float = 0.0) -> np.ndarray:
    G = len(pos)
    A = np.zeros((G + 1, G + 1))
    gamma = variogram(pairwise_distances(pos))
    np.fill_diagonal(gamma, 0.0)
    A[:G, :G] = gamma - jitter * np.eye(G)
    A[:G, G] = 1.0
    A[G, :G] = 1.0
    return A


def _factor(A: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(A)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(lu)) or pivots.min() <= 1e-12 * max(pivots.max(), 1.0):
        return None
    return lu, piv


def ordinary_krige(gauges: Sequence[VirtualGauge], grid: GridSpec, variogram: Variogram) -> KrigingResult:
    """
    Ordinary kriging of every cell centre.

    Solves [Gamma 1; 1^T 0][w; mu] = [gamma_0; 1] for all cells with one LU
    factorization. The semivariance between coincident points is 0 in the
    system; the variance sum_i w_i gamma_i0 + mu uses the nugget there.
    """
    if len(gauges) < 2:
        raise ValueError("Kriging needs at least 2 gauges")
    pos = _positions(gauges)
    z = _values(gauges)
    d_gg = pairwise_distances(pos)
    np.fill_diagonal(d_gg, np.inf)
    if d_gg.min() <= COINCIDENT_TOL:
        raise ValueError("Kriging gauges must have distinct positions")

    G = len(z)
    factor = _factor(_kriging_matrix(pos, variogram))
    if factor is None:
        jitter = 1e-10 * max(variogram.sill + variogram.nugget, 1.0)
        logger.warning("Kriging matrix is singular; retrying with jitter %.1e", jitter)
        factor = _factor(_kriging_matrix(pos, variogram, jitter))
        if factor is None:
            raise SingularSystemError("Kriging matrix is singular after a jittered retry")

    d = pairwise_distances(pos, grid.cell_centers())
    coincident = d <= COINCIDENT_TOL
    rhs = np.vstack([np.where(coincident, 0.0, variogram(d)), np.ones(grid.size)])
    sol = linalg.lu_solve(factor, rhs)
    w, mu = sol[:G], sol[G]
    raw = z @ w
    gamma_var = np.where(coincident, variogram.nugget, variogram(d))
    variance = np.sum(w * gamma_var, axis=0) + mu
    negative = int((raw < 0).sum())
    if negative:
        logger.debug("Kriging clamped %d negative cells", negative)
    return KrigingResult(field=RainField(np.maximum(raw, 0.0).reshape(grid.shape), grid),
                         variance=variance.reshape(grid.shape),
                         raw=raw.reshape(grid.shape),
                         weight_sums=w.sum(axis=0).reshape(grid.shape))
