"""Forward-imputed hourly grid, InSight feature coding, and ridge logistic
regression.

The hourly matrix averages observations within each hour, carries the
previous hour forward through gaps, zero-fills hours before the first
observation, and end-aligns everything so the final column is the
prediction hour.

InSight slides a six-hour window over that grid and emits, per window and
feature set: raw means, tercile-coded differences, tercile-coded pair
correlations and tercile-coded triplet correlations. Tercile cuts come
from the distribution of nonzero statistics across the training
population (forward imputation produces exact zeros in droves, which
would otherwise swamp the quantiles).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError

INSIGHT_WINDOW = 6


@dataclass
class HourlyMatrix:
    """values: (M, N) end-aligned hourly grid; presence flags the hours
    that had at least one real observation."""

    values: np.ndarray
    presence: np.ndarray


def hourly_impute(series, n_hours: int, m_features: int) -> HourlyMatrix:
    """Carry-forward hourly grid with the last column at prediction time."""
    times = np.asarray(series.times, dtype=np.float64)
    feats = np.asarray(series.features, dtype=np.int64)
    vals = np.asarray(series.values, dtype=np.float64)
    if times.size == 0:
        return HourlyMatrix(np.zeros((m_features, n_hours)), np.zeros((m_features, n_hours)))
    # hour k counts back from prediction time: k = floor(-t)
    hour = np.floor(-times).astype(int)
    hour = np.maximum(hour, 0)
    width = int(hour.max()) + 1
    cols = width - 1 - hour  # end-aligned column index
    sums = np.zeros((m_features, width))
    counts = np.zeros((m_features, width))
    np.add.at(sums, (feats, cols), vals)
    np.add.at(counts, (feats, cols), 1.0)
    observed = counts > 0
    grid = np.zeros((m_features, width))
    grid[observed] = sums[observed] / counts[observed]
    for col in range(1, width):
        empty = ~observed[:, col]
        grid[empty, col] = grid[empty, col - 1]
    if width >= n_hours:
        grid = grid[:, width - n_hours :]
        presence = observed[:, width - n_hours :].astype(float)
    else:
        pad = n_hours - width
        grid = np.concatenate([np.zeros((m_features, pad)), grid], axis=1)
        presence = np.concatenate([np.zeros((m_features, pad)), observed.astype(float)], axis=1)
    return HourlyMatrix(grid, presence)


def _centered(x):
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    return c, math.sqrt(float(np.mean(c * c)))


def pair_correlation(x, y) -> float:
    """Pearson correlation with the zero-variance convention: 0."""
    if len(x) != len(y) or len(x) < 2:
        raise InputError("pair correlation needs equal-length vectors of length >= 2")
    cx, sx = _centered(x)
    cy, sy = _centered(y)
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.mean(cx * cy) / (sx * sy))


def triplet_correlation(x, y, z) -> float:
    """Third-order analogue of Pearson correlation.

    E[(X-muX)(Y-muY)(Z-muZ)] / (sigmaX sigmaY sigmaZ), with population
    moments; any zero-variance argument makes the value 0 by convention.
    """
    if not (len(x) == len(y) == len(z)) or len(x) < 2:
        raise InputError("triplet correlation needs equal-length vectors of length >= 2")
    cx, sx = _centered(x)
    cy, sy = _centered(y)
    cz, sz = _centered(z)
    if sx == 0.0 or sy == 0.0 or sz == 0.0:
        return 0.0
    return float(np.mean(cx * cy * cz) / (sx * sy * sz))


@dataclass(frozen=True)
class TercileThresholds:
    lo: float
    hi: float


def tercile_thresholds(population) -> TercileThresholds | None:
    """Tercile cut points of the nonzero part of a population; None when
    nothing nonzero exists (every value then codes to 0)."""
    population = np.asarray(population, dtype=np.float64)
    nz = population[population != 0.0]
    if nz.size == 0:
        return None
    lo, hi = np.quantile(nz, [1.0 / 3.0, 2.0 / 3.0])
    return TercileThresholds(float(lo), float(hi))


def code_with_thresholds(values, thresholds: TercileThresholds | None) -> np.ndarray:
    """+1 above the upper tercile, -1 below the lower, 0 otherwise.

    Boundary values land in the 0 band (strict inequalities)."""
    values = np.asarray(values, dtype=np.float64)
    if thresholds is None:
        return np.zeros(values.shape, dtype=np.int64)
    out = np.zeros(values.shape, dtype=np.int64)
    out[values > thresholds.hi] = 1
    out[values < thresholds.lo] = -1
    return out


def discretize(values, population) -> np.ndarray:
    """One-shot coding of ``values`` against a raw statistic population."""
    return code_with_thresholds(values, tercile_thresholds(population))


def n_insight_features(n_hours: int, m: int) -> int:
    return (n_hours - 5) * (2 * m + math.comb(m, 2) + math.comb(m, 3))


def _window_raw_stats(values: np.ndarray, start: int):
    """Means, diffs and correlation statistics of one six-hour window."""
    window = values[:, start : start + INSIGHT_WINDOW]
    means = window.mean(axis=1)
    diffs = window[:, -1] - window[:, 0]
    m = values.shape[0]
    pairs = {
        (i, j): pair_correlation(window[i], window[j])
        for i, j in itertools.combinations(range(m), 2)
    }
    triplets = {
        (i, j, k): triplet_correlation(window[i], window[j], window[k])
        for i, j, k in itertools.combinations(range(m), 3)
    }
    return means, diffs, pairs, triplets


@dataclass
class InsightThresholds:
    """Tercile cuts per statistic, fit once on the training population."""

    diff: dict
    pair: dict
    triplet: dict


def fit_insight_thresholds(matrices) -> InsightThresholds:
    if not matrices:
        raise InputError("threshold fitting needs at least one patient matrix")
    m, n = matrices[0].values.shape
    diff_pop = {i: [] for i in range(m)}
    pair_pop = {key: [] for key in itertools.combinations(range(m), 2)}
    trip_pop = {key: [] for key in itertools.combinations(range(m), 3)}
    for matrix in matrices:
        for start in range(n - INSIGHT_WINDOW + 1):
            _, diffs, pairs, triplets = _window_raw_stats(matrix.values, start)
            for i in range(m):
                diff_pop[i].append(diffs[i])
            for key, value in pairs.items():
                pair_pop[key].append(value)
            for key, value in triplets.items():
                trip_pop[key].append(value)
    return InsightThresholds(
        {i: tercile_thresholds(v) for i, v in diff_pop.items()},
        {k: tercile_thresholds(v) for k, v in pair_pop.items()},
        {k: tercile_thresholds(v) for k, v in trip_pop.items()},
    )


@dataclass
class InsightFeatures:
    vector: np.ndarray


def insight_feature_names(n_hours: int, m: int) -> list[str]:
    names = []
    for w in range(n_hours - INSIGHT_WINDOW + 1):
        names += [f"w{w:02d}_mean_f{i}" for i in range(m)]
        names += [f"w{w:02d}_diff_f{i}" for i in range(m)]
        names += [f"w{w:02d}_corr_f{i}_f{j}" for i, j in itertools.combinations(range(m), 2)]
        names += [
            f"w{w:02d}_tri_f{i}_f{j}_f{k}" for i, j, k in itertools.combinations(range(m), 3)
        ]
    return names


def insight_vector(matrix: HourlyMatrix, thresholds: InsightThresholds) -> InsightFeatures:
    """Window-major feature vector: means, coded diffs, coded pair and
    triplet correlations, windows sliding by one hour."""
    m, n = matrix.values.shape
    if n < INSIGHT_WINDOW:
        raise InputError(f"need at least {INSIGHT_WINDOW} hourly columns, got {n}")
    parts = []
    for start in range(n - INSIGHT_WINDOW + 1):
        means, diffs, pairs, triplets = _window_raw_stats(matrix.values, start)
        parts.append(means)
        parts.append(
            np.array([code_with_thresholds(diffs[i], thresholds.diff[i]) for i in range(m)], dtype=np.float64)
        )
        parts.append(
            np.array(
                [code_with_thresholds(v, thresholds.pair[k]) for k, v in sorted(pairs.items())],
                dtype=np.float64,
            )
        )
        parts.append(
            np.array(
                [code_with_thresholds(v, thresholds.triplet[k]) for k, v in sorted(triplets.items())],
                dtype=np.float64,
            )
        )
    vector = np.concatenate(parts)
    expected = n_insight_features(n, m)
    if vector.shape[0] != expected:
        raise InputError(f"feature vector length {vector.shape[0]} != formula value {expected}")
    return InsightFeatures(vector)


def insight_filter(series, required_features, lookback_hours: float = 5.0) -> bool:
    """True when every required dynamic feature was observed at least once
    within the lookback window before prediction time."""
    times = np.asarray(series.times)
    feats = np.asarray(series.features)
    recent = times >= -lookback_hours
    seen = set(feats[recent].tolist())
    return all(int(f) in seen for f in required_features)


# ----------------------------------------------------------------------
# ridge logistic regression (Newton with backtracking)


class RidgeLogisticRegression:
    """Binary logistic regression with an L2 penalty on the weights.

    Minimizes mean cross-entropy + 0.5 * l2 * ||w||^2 (intercept free) by
    damped Newton steps until the gradient 2-norm drops below ``tol``.
    """

    def __init__(self, l2: float = 1e-3, max_iter: int = 100, tol: float = 1e-6):
        if l2 < 0:
            raise InputError("l2 must be non-negative")
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol
        self.weights = None
        self.intercept = 0.0
        self.converged = False
        self.achieved_tol = np.inf

    def _objective(self, a, y, theta):
        z = a @ theta
        ce = float(np.mean(np.logaddexp(0.0, z) - y * z))
        return ce + 0.5 * self.l2 * float(theta[:-1] @ theta[:-1])

    def fit(self, features, labels):
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise InputError("features must be (n, d) with one label per row")
        if len(np.unique(y)) < 2:
            raise InputError("need at least one example of each class")
        n, d = x.shape
        a = np.concatenate([x, np.ones((n, 1))], axis=1)
        theta = np.zeros(d + 1)
        reg = self.l2 * np.ones(d + 1)
        reg[-1] = 0.0
        value = self._objective(a, y, theta)
        for _ in range(self.max_iter):
            z = a @ theta
            p = 1.0 / (1.0 + np.exp(-np.clip(z, -700, 700)))
            grad = a.T @ (p - y) / n + reg * theta
            gnorm = float(np.linalg.norm(grad))
            self.achieved_tol = gnorm
            if gnorm <= self.tol:
                self.converged = True
                break
            curvature = np.maximum(p * (1.0 - p), 1e-10)
            hessian = (a.T * curvature) @ a / n + np.diag(reg)
            try:
                step = np.linalg.solve(hessian, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hessian, grad, rcond=None)[0]
            scale = 1.0
            for _ in range(30):
                candidate = theta - scale * step
                new_value = self._objective(a, y, candidate)
                if new_value <= value - 1e-4 * scale * float(grad @ step):
                    break
                scale *= 0.5
            theta = theta - scale * step
            value = self._objective(a, y, theta)
        if not self.converged:
            warnings.warn(
                f"ridge logistic regression stopped at gradient norm {self.achieved_tol:.3e} "
                f"(target {self.tol:.0e})",
                stacklevel=2,
            )
        self.weights = theta[:-1]
        self.intercept = float(theta[-1])
        return self

    def predict_proba(self, features) -> np.ndarray:
        if self.weights is None:
            raise InputError("fit before predicting")
        z = np.asarray(features, dtype=np.float64) @ self.weights + self.intercept
        return 1.0 / (1.0 + np.exp(-np.clip(z, -700, 700)))


def ridge_logreg_fit(features, labels, l2: float, max_iter: int = 100, tol: float = 1e-6) -> RidgeLogisticRegression:
    return RidgeLogisticRegression(l2=l2, max_iter=max_iter, tol=tol).fit(features, labels)
