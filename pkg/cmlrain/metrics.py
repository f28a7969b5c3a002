"""
Evaluation metrics for reconstructed fields and posterior ensembles.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .forward import GridMismatchError, RainField
from .gp1d import OraclePosterior1D

CI_LEVEL = 0.95
MIN_QUANTILE_ENSEMBLE = 20
DEFAULT_PROJECTIONS = 128


@dataclass(frozen=True)
class FieldMetrics:
    rmse: float
    pcc: Optional[float]
    cum_rain_diff: float

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


@dataclass(frozen=True)
class EnsembleMetrics:
    sliced_wasserstein: float
    mean_l2: float
    q05_l2: float
    q95_l2: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _as_array(field_) -> Tuple[np.ndarray, Optional[object]]:
    if isinstance(field_, RainField):
        return field_.values, field_.grid
    return np.asarray(field_, dtype=float), None


def field_metrics(recon, reference) -> FieldMetrics:
    """
    Compare a reconstruction against a reference field.

    Args:
        recon: Reconstructed RainField (or H x W array)
        reference: Reference RainField (or H x W array)

    Returns:
        FieldMetrics; pcc is None when either field is constant
    """
    r, grid_r = _as_array(recon)
    x, grid_x = _as_array(reference)
    if r.shape != x.shape or (grid_r is not None and grid_x is not None and grid_r != grid_x):
        raise GridMismatchError(f"Cannot compare fields of shape {r.shape} and {x.shape}")
    r, x = r.ravel(), x.ravel()
    rmse = float(np.sqrt(np.mean((r - x) ** 2)))
    pcc = None
    if np.std(r) > 0 and np.std(x) > 0:
        pcc = float(np.corrcoef(r, x)[0, 1])
    return FieldMetrics(rmse=rmse, pcc=pcc, cum_rain_diff=float(r.sum() - x.sum()))


def ensemble_field_metrics(ensemble: np.ndarray, reference) -> FieldMetrics:
    """FieldMetrics of the ensemble mean; members may be flat or H x W."""
    x, _ = _as_array(reference)
    members = np.asarray(ensemble, dtype=float).reshape(-1, x.size)
    return field_metrics(members.mean(axis=0).reshape(x.shape), reference)


def _empirical_quantiles(sorted_proj: np.ndarray, n: int) -> np.ndarray:
    if sorted_proj.shape[0] == n:
        return sorted_proj
    return np.quantile(sorted_proj, (np.arange(n) + 0.5) / n, axis=0)


def sliced_wasserstein(samples_a, samples_b, n_projections: int = DEFAULT_PROJECTIONS, rng=0) -> float:
    """
    Sliced 2-Wasserstein distance between two sample sets.

    Projects both sets on n_projections random unit directions and averages
    the 1-D W2 distances. Unequal sample counts are matched on the quantile
    levels of the larger set by linear interpolation.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Sliced Wasserstein needs at least 2 samples per set")
    if n_projections < 1:
        raise ValueError("n_projections must be positive")

    gen = np.random.default_rng(rng)
    dirs = gen.standard_normal((a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)

    n = max(len(a), len(b))
    qa = _empirical_quantiles(np.sort(a @ dirs, axis=0), n)
    qb = _empirical_quantiles(np.sort(b @ dirs, axis=0), n)
    w2 = np.sqrt(np.mean((qa - qb) ** 2, axis=0))
    return float(w2.mean())


def quantile_errors(ensemble, oracle: OraclePosterior1D,
                    levels: Sequence[float] = (0.05, 0.95)) -> Tuple[float, float, float]:
    """
    Pointwise quantile and mean errors of an ensemble against the oracle posterior.

    Returns:
        (low-quantile l2 error, high-quantile l2 error, l2 error of the ensemble mean)
    """
    samples = np.asarray(ensemble, dtype=float)
    samples = samples.reshape(len(samples), -1)
    if len(samples) < MIN_QUANTILE_ENSEMBLE:
        raise ValueError(f"Quantile errors need at least {MIN_QUANTILE_ENSEMBLE} samples, got {len(samples)}")
    if samples.shape[1] != oracle.mean.size:
        raise ValueError("Ensemble dimension does not match the oracle grid")
    lo, hi = levels
    q_lo, q_hi = np.quantile(samples, [lo, hi], axis=0)
    err_lo = float(np.linalg.norm(q_lo - oracle.quantile(lo)))
    err_hi = float(np.linalg.norm(q_hi - oracle.quantile(hi)))
    mean_l2 = float(np.linalg.norm(samples.mean(axis=0) - oracle.mean))
    return err_lo, err_hi, mean_l2


def ensemble_metrics(ensemble, oracle: OraclePosterior1D, oracle_samples,
                     n_projections: int = DEFAULT_PROJECTIONS, rng=0) -> EnsembleMetrics:
    sw = sliced_wasserstein(ensemble, oracle_samples, n_projections, rng)
    q05, q95, mean_l2 = quantile_errors(ensemble, oracle)
    return EnsembleMetrics(sliced_wasserstein=sw, mean_l2=mean_l2, q05_l2=q05, q95_l2=q95)


def aggregate_with_ci(values: Iterable[Optional[float]]) -> Tuple[float, float]:
    """
    Mean and normal-approximation 95% CI half-width.

    Missing values (None / NaN) are dropped; a single value has zero width.
    """
    arr = np.array([v for v in values if v is not None], dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size == 1:
        return float(arr[0]), 0.0
    z = stats.norm.ppf(0.5 + CI_LEVEL / 2)
    return float(arr.mean()), float(z * arr.std(ddof=1) / np.sqrt(arr.size))


def metrics_table(rows: List[Dict], group_by: str = "method") -> pd.DataFrame:
    """
    Aggregate per-field metric rows into one row per method.

    Args:
        rows: Dicts holding the group key, optionally "field", and numeric metrics

    Returns:
        DataFrame indexed by method with `<metric>` and `<metric>_ci95` columns
    """
    if not rows:
        return pd.DataFrame()
    df = pd.DataFrame(rows)
    metric_cols = [c for c in df.columns if c not in (group_by, "field")]
    out = {}
    for method, group in df.groupby(group_by, sort=False):
        entry = {"n_fields": len(group)}
        for col in metric_cols:
            mean, half = aggregate_with_ci(pd.to_numeric(group[col], errors="coerce").tolist())
            entry[col] = mean
            entry[f"{col}_ci95"] = half
        out[method] = entry
    table = pd.DataFrame.from_dict(out, orient="index")
    table.index.name = group_by
    return table
