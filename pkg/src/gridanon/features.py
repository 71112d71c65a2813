"""Per-meter characteristic features and record-similarity graphs.

Five grouping scenarios are supported: energy plus peak power, energy
alone, a PCA projection of a wider consumption-statistics set, an affinity
(inverse-distance) variant, and a degenerate single-group scenario.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataFormatError
from .model import LoadProfile, TimeGrid
from .partition import SimilarityGraph


class ScenarioKind(Enum):
    ENERGY_MAXP = "energy_maxp"
    ENERGY = "energy"
    PCA = "pca"
    AFFINITY = "affinity"
    ONE_GROUP = "one_group"

    @classmethod
    def parse(cls, text: str) -> "ScenarioKind":
        for k in cls:
            if k.value == text:
                return k
        raise DataFormatError(f"unknown scenario {text!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    pca_variance_target: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.pca_variance_target <= 1.0:
            raise DataFormatError("pca_variance_target must be in (0, 1]")


@dataclass(frozen=True)
class FeatureMatrix:
    meter_ids: tuple[str, ...]
    values: np.ndarray  # [N_records, K]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.meter_ids) or v.shape[1] != len(self.feature_names):
            raise DataFormatError("feature matrix shape does not match labels")
        if not np.all(np.isfinite(v)):
            raise DataFormatError("feature matrix contains non-finite entries")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "meter_ids", tuple(self.meter_ids))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


def annual_energy(profile: LoadProfile, grid: TimeGrid) -> float:
    """Total energy of the series in joules (sum of power times step)."""
    return profile.energy_j(grid)


def max_power(profile: LoadProfile) -> float:
    """Peak power of the series in watts."""
    return float(profile.power_w.max())


# ---------------------------------------------------------------------------
# Consumption statistics used as the PCA base set.  Each entry maps rows of
# power values [N, T] plus the grid to one column of features.
# ---------------------------------------------------------------------------


def _daily_slices(grid: TimeGrid):
    days = grid.day_index()
    uniq, start = np.unique(days, return_index=True)
    return uniq, start


def _daily_energies(p: np.ndarray, grid: TimeGrid) -> np.ndarray:
    days = grid.day_index()
    uniq = np.unique(days)
    out = np.empty((p.shape[0], uniq.size))
    for i, d in enumerate(uniq):
        out[:, i] = p[:, days == d].sum(axis=1) * grid.step_seconds
    return out


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _f_energy(p, grid):
    return p.sum(axis=1) * grid.step_seconds


def _f_max(p, grid):
    return p.max(axis=1)


def _f_min(p, grid):
    return p.min(axis=1)


def _f_mean_max_ratio(p, grid):
    return _safe_ratio(p.mean(axis=1), p.max(axis=1))


def _f_daily_mean_var(p, grid):
    days = grid.day_index()
    uniq = np.unique(days)
    daily_mean = np.empty((p.shape[0], uniq.size))
    for i, d in enumerate(uniq):
        daily_mean[:, i] = p[:, days == d].mean(axis=1)
    if uniq.size < 2:
        return np.zeros(p.shape[0])
    return daily_mean.var(axis=1, ddof=1)


def _f_night_day_ratio(p, grid):
    night = grid.hour_of_day() < 6.0
    return _safe_ratio(p[:, night].sum(axis=1), p[:, ~night].sum(axis=1))


def _f_weekday_weekend_ratio(p, grid):
    weekend = grid.day_of_week() >= 5
    return _safe_ratio(p[:, ~weekend].sum(axis=1), p[:, weekend].sum(axis=1))


def _f_daily_energy_lag1(p, grid):
    e = _daily_energies(p, grid)
    if e.shape[1] < 3:
        return np.zeros(p.shape[0])
    a = e[:, :-1] - e[:, :-1].mean(axis=1, keepdims=True)
    b = e[:, 1:] - e[:, 1:].mean(axis=1, keepdims=True)
    num = (a * b).sum(axis=1)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    return _safe_ratio(num, den)


PCA_BASE_FEATURES: dict[str, callable] = {
    "annual_energy_j": _f_energy,
    "max_power_w": _f_max,
    "min_power_w": _f_min,
    "mean_max_ratio": _f_mean_max_ratio,
    "daily_mean_var": _f_daily_mean_var,
    "night_day_ratio": _f_night_day_ratio,
    "weekday_weekend_ratio": _f_weekday_weekend_ratio,
    "daily_energy_lag1_autocorr": _f_daily_energy_lag1,
}


def build_features(
    profiles,
    grid: TimeGrid,
    spec: ScenarioSpec,
    pca_base: tuple[str, ...] | None = None,
) -> FeatureMatrix:
    """Feature matrix for the given scenario.

    EnergyMaxP (also used by Affinity and OneGroup) yields the two columns
    [annual energy, peak power]; Energy yields one column; PCA computes the
    base statistics set and keeps the leading principal components that
    explain at least spec.pca_variance_target of the variance.
    """
    profiles = list(profiles)
    if not profiles:
        raise DataFormatError("need at least one profile")
    for prof in profiles:
        if prof.power_w.size != len(grid):
            raise DataFormatError(f"meter {prof.meter_id} not aligned to grid")
    p = np.vstack([prof.power_w for prof in profiles])
    ids = tuple(prof.meter_id for prof in profiles)

    if spec.kind in (ScenarioKind.ENERGY_MAXP, ScenarioKind.AFFINITY, ScenarioKind.ONE_GROUP):
        vals = np.column_stack([_f_energy(p, grid), _f_max(p, grid)])
        return FeatureMatrix(ids, vals, ("annual_energy_j", "max_power_w"))
    if spec.kind is ScenarioKind.ENERGY:
        return FeatureMatrix(ids, _f_energy(p, grid)[:, None], ("annual_energy_j",))
    if spec.kind is ScenarioKind.PCA:
        if len(profiles) < 2:
            raise DataFormatError("PCA needs at least 2 records")
        names = tuple(pca_base) if pca_base is not None else tuple(PCA_BASE_FEATURES)
        for name in names:
            if name not in PCA_BASE_FEATURES:
                raise DataFormatError(f"unknown base feature {name!r}")
        base = np.column_stack([PCA_BASE_FEATURES[name](p, grid) for name in names])
        proj, comp_names = _pca_project(base, spec.pca_variance_target)
        return FeatureMatrix(ids, proj, comp_names)
    raise DataFormatError(f"unhandled scenario kind {spec.kind}")


def _pca_project(base: np.ndarray, variance_target: float) -> tuple[np.ndarray, tuple[str, ...]]:
    """Standardise columns, keep the fewest leading components reaching the
    cumulative explained-variance target, and project onto them."""
    mu = base.mean(axis=0)
    sd = base.std(axis=0, ddof=1)
    keep = sd > 0
    xs = np.where(keep, (base - mu) / np.where(keep, sd, 1.0), 0.0)
    cov = xs.T @ xs / (base.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = evecs[:, ::-1]
    total = evals.sum()
    if total <= 0.0:
        return np.zeros((base.shape[0], 1)), ("pc1",)
    cum = np.cumsum(evals) / total
    n_comp = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    n_comp = min(n_comp, evals.size)
    comps = evecs[:, :n_comp].copy()
    for j in range(n_comp):
        peak = int(np.argmax(np.abs(comps[:, j])))
        if comps[peak, j] < 0:
            comps[:, j] = -comps[:, j]
    return xs @ comps, tuple(f"pc{j + 1}" for j in range(n_comp))


def explained_variance_ratio(base: FeatureMatrix) -> np.ndarray:
    """Eigenvalue spectrum of the standardised feature covariance, as ratios."""
    xs = zscore_normalize(base).values
    cov = xs.T @ xs / (xs.shape[0] - 1)
    evals = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = evals.sum()
    return evals / total if total > 0 else evals


def zscore_normalize(m: FeatureMatrix) -> FeatureMatrix:
    """Scale every column to zero mean and unit sample (n-1) deviation.

    Constant columns carry no information; they map to all zeros with a
    warning rather than failing.
    """
    if len(m.meter_ids) < 2:
        raise DataFormatError("z-scoring needs at least 2 records")
    mu = m.values.mean(axis=0)
    sd = m.values.std(axis=0, ddof=1)
    flat = sd == 0
    if flat.any():
        names = [m.feature_names[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"constant feature column(s) {names} mapped to zero", stacklevel=2)
    vals = np.where(flat, 0.0, (m.values - mu) / np.where(flat, 1.0, sd))
    return FeatureMatrix(m.meter_ids, vals, m.feature_names)


def distance_matrix(m: FeatureMatrix) -> SimilarityGraph:
    """Complete graph weighted by Euclidean distance between feature rows."""
    x = m.values
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = np.sqrt(np.clip(d2, 0.0, None))
    d = 0.5 * (d + d.T)  # exact symmetry despite rounding
    np.fill_diagonal(d, 0.0)
    return SimilarityGraph.complete(m.meter_ids, d)


def affinity_matrix(g: SimilarityGraph, cap: float = 1e9) -> SimilarityGraph:
    """Replace distances by inverse distances, clamped to `cap`."""
    if cap <= 0:
        raise DataFormatError("affinity cap must be positive")
    if not np.all(g.adjacency | np.eye(g.n, dtype=bool)):
        raise DataFormatError("affinity transform expects a complete graph")
    with np.errstate(divide="ignore"):
        a = np.where(g.weights > 0, 1.0 / np.where(g.weights > 0, g.weights, 1.0), cap)
    a = np.minimum(a, cap)
    np.fill_diagonal(a, 0.0)
    return SimilarityGraph(g.node_ids, a, g.adjacency.copy())
