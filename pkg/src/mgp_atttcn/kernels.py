"""Kernel functions and covariance assembly for the sum-of-Kronecker prior.

The prior over latent feature trajectories couples features and times as

    cov[(t_i, k), (t_j, k')] = sum_l  K_feat_l[k, k'] * K_time_l(t_i, t_j)

with one (time kernel, feature covariance) pair per smoothness cluster.
Covariance matrices are assembled only over the (time, feature) pairs that
actually occur; the dense Kronecker construction exists solely as a test
oracle.

All functions are pure and torch-differentiable so gradients reach the raw
kernel parameters during end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InputError, NumericalError
from .torchutil import DTYPE, as_tensor, softplus, softplus_inverse

TIME_KERNEL_FAMILIES = ("OU", "SE")

# Jitter ladder used before every Cholesky factorization: start at 1e-6,
# double on failure, give up past 1e-2.
JITTER_INITIAL = 1e-6
JITTER_MAX = 1e-2


@dataclass(frozen=True)
class TimeKernelSpec:
    """Stationary time kernel: family plus a positive lengthscale in hours.

    OU is the default everywhere; SE exists for the smooth-kernel ablation
    and is only wired up when that ablation is selected.
    """

    family: str = "OU"
    lengthscale: object = 1.0  # float or 0-dim torch tensor (trainable path)

    def __post_init__(self):
        if self.family not in TIME_KERNEL_FAMILIES:
            raise InputError(f"unknown time kernel family {self.family!r}")
        value = float(torch.as_tensor(self.lengthscale).detach())
        if not np.isfinite(value) or value <= 0:
            raise InputError(f"lengthscale must be positive, got {value}")

    def lengthscale_tensor(self) -> torch.Tensor:
        return as_tensor(self.lengthscale)


class FeatureCovFactor:
    """Lower-triangular factor of one cluster's feature covariance.

    Stores the packed triangle as raw parameters; the diagonal passes
    through softplus so the reconstructed factor has a strictly positive
    diagonal and ``factor @ factor.T`` is PSD under unconstrained gradient
    steps.
    """

    def __init__(self, raw_tril: torch.Tensor, side: int):
        expected = side * (side + 1) // 2
        raw_tril = torch.as_tensor(raw_tril, dtype=DTYPE)
        if raw_tril.shape != (expected,):
            raise InputError(
                f"raw_tril must have {expected} entries for side {side}, "
                f"got shape {tuple(raw_tril.shape)}"
            )
        self.raw_tril = raw_tril
        self.side = side
        rows, cols = torch.tril_indices(side, side)
        self._rows, self._cols = rows, cols
        self._diag_mask = rows == cols

    @classmethod
    def from_matrix(cls, matrix) -> "FeatureCovFactor":
        """Build from an explicit lower-triangular factor (tests, generators)."""
        m = torch.as_tensor(matrix, dtype=DTYPE)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InputError("factor must be square")
        if not torch.allclose(m, torch.tril(m)):
            raise InputError("factor must be lower triangular")
        if (torch.diagonal(m) <= 0).any():
            raise InputError("factor diagonal must be strictly positive")
        side = m.shape[0]
        rows, cols = torch.tril_indices(side, side)
        packed = m[rows, cols].clone()
        diag = rows == cols
        packed[diag] = softplus_inverse(packed[diag])
        return cls(packed, side)

    @property
    def factor(self) -> torch.Tensor:
        """The M x M lower-triangular factor with positive diagonal."""
        values = torch.where(self._diag_mask, softplus(self.raw_tril), self.raw_tril)
        out = torch.zeros((self.side, self.side), dtype=DTYPE)
        # index_put keeps autograd intact, unlike in-place fancy assignment on views
        return out.index_put((self._rows, self._cols), values)


class NoiseScales:
    """Per-feature observation noise standard deviations (positive)."""

    def __init__(self, raw: torch.Tensor):
        raw = torch.as_tensor(raw, dtype=DTYPE)
        if raw.ndim != 1:
            raise InputError("noise raw parameters must be a vector")
        self.raw = raw

    @classmethod
    def from_sigma(cls, sigma) -> "NoiseScales":
        sigma = as_tensor(sigma)
        if (sigma <= 0).any():
            raise InputError("noise scales must be strictly positive")
        return cls(softplus_inverse(sigma))

    @property
    def sigma(self) -> torch.Tensor:
        return softplus(self.raw)

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass(frozen=True)
class ObservationIndex:
    """Ordered (time, feature) pairs a covariance is evaluated over.

    Order is whatever the caller supplies and is preserved; rows/columns of
    assembled matrices follow it exactly.
    """

    times: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        features = np.asarray(self.features, dtype=np.int64)
        if times.ndim != 1 or features.ndim != 1 or times.shape != features.shape:
            raise InputError("times and features must be equal-length vectors")
        if not np.all(np.isfinite(times)):
            raise InputError("observation times must be finite")
        if features.size and features.min() < 0:
            raise InputError("feature ids must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "features", features)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple]) -> "ObservationIndex":
        pairs = list(pairs)
        times = np.array([p[0] for p in pairs], dtype=np.float64)
        features = np.array([p[1] for p in pairs], dtype=np.int64)
        return cls(times, features)

    def __len__(self) -> int:
        return self.times.shape[0]


Cluster = tuple  # (TimeKernelSpec, FeatureCovFactor)


def time_kernel(spec: TimeKernelSpec, t1: float, t2: float):
    """Covariance between two time points; in (0, 1], 1 at zero lag."""
    for t in (t1, t2):
        if not np.isfinite(float(torch.as_tensor(t))):
            raise InputError("time kernel inputs must be finite")
    return time_kernel_matrix(spec, as_tensor([t1]), as_tensor([t2]))[0, 0]

def time_kernel_matrix(spec: TimeKernelSpec, ta: torch.Tensor, tb: torch.Tensor) -> torch.Tensor:
    """Pairwise kernel matrix between two vectors of times."""
    lengthscale = spec.lengthscale_tensor()
    delta = ta.reshape(-1, 1) - tb.reshape(1, -1)
    if spec.family == "OU":
        return torch.exp(-delta.abs() / lengthscale)
    return torch.exp(-0.5 * (delta / lengthscale) ** 2)


def feature_cov(factor: FeatureCovFactor) -> torch.Tensor:
    """Reconstruct the PSD feature covariance factor @ factor.T."""
    f = factor.factor
    return f @ f.T


def _check_features(index: ObservationIndex, side: int):
    if len(index) and index.features.max() >= side:
        raise InputError(
            f"feature id {index.features.max()} out of range for {side} features"
        )


def prior_cov(index: ObservationIndex, clusters: Sequence[Cluster]) -> torch.Tensor:
    """Noise-free prior covariance over one index (symmetric)."""
    return cross_cov(index, index, clusters)


def cross_cov(
    index: ObservationIndex, grid: ObservationIndex, clusters: Sequence[Cluster]
) -> torch.Tensor:
    """Cross covariance, rows indexed by ``grid``, columns by ``index``.

    No noise term is added; with ``grid is index`` this is the prior block.
    """
    n_grid, n_obs = len(grid), len(index)
    if n_grid == 0 or n_obs == 0:
        return torch.zeros((n_grid, n_obs), dtype=DTYPE)
    tg, to = as_tensor(grid.times), as_tensor(index.times)
    fg = torch.as_tensor(grid.features)
    fo = torch.as_tensor(index.features)
    out = torch.zeros((n_grid, n_obs), dtype=DTYPE)
    for spec, factor in clusters:
        _check_features(index, factor.side)
        _check_features(grid, factor.side)
        k_feat = feature_cov(factor)
        out = out + k_feat[fg][:, fo] * time_kernel_matrix(spec, tg, to)
    return out


def assemble_observed_cov(
    index: ObservationIndex, clusters: Sequence[Cluster], noise: NoiseScales
) -> torch.Tensor:
    """Observed-pair covariance: kernel sum plus per-pair noise variance.

    Entry [a, b] couples pair (t_a, k_a) with (t_b, k_b); sigma_k^2 is added
    on the diagonal only (independent noise per recorded observation).
    """
    if len(index) == 0:
        raise InputError("no observations: cannot assemble observed covariance")
    _check_features(index, len(noise))
    cov = prior_cov(index, clusters)
    sigma = noise.sigma[torch.as_tensor(index.features)]
    return cov + torch.diag(sigma**2)


def safe_cholesky(matrix: torch.Tensor, snapshot=None) -> tuple[torch.Tensor, float]:
    """Cholesky factor of ``matrix + jitter*I`` with an escalating jitter.

    Jitter starts at 1e-6 and doubles on failure; past 1e-2 a NumericalError
    carries the caller-supplied parameter snapshot. Returns (L, jitter used).
    """
    n = matrix.shape[0]
    eye = torch.eye(n, dtype=DTYPE)
    jitter = JITTER_INITIAL
    while jitter <= JITTER_MAX:
        chol, info = torch.linalg.cholesky_ex(matrix + jitter * eye)
        if int(info) == 0 and torch.isfinite(chol).all():
            return chol, jitter
        jitter *= 2.0
    raise NumericalError(
        f"covariance not factorizable up to jitter {JITTER_MAX:g}", snapshot=snapshot
    )
