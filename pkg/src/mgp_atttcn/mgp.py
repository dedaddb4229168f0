"""Posterior inference on a fixed hourly grid and differentiable MC sampling.

Given one patient's sparse observations, the multitask GP produces a
Gaussian posterior over latent feature values on an hourly grid ending at
the prediction time (t = 0). Reparameterized draws from that posterior,
with static features broadcast into extra channels, are what the
downstream classifier consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import InputError
from .torchutil import DTYPE, as_tensor, generator, softplus, softplus_inverse

# Grid spacing is one hour; every fixed count in the pipeline assumes it.
GRID_STEP_HOURS = 1.0
DEFAULT_GRID_SIZE = 25
# Memory guard: inference only sees the most recent observations.
MAX_OBSERVATIONS = 250


class MgpParameters:
    """Trainable GP state: per-cluster lengthscales and feature-covariance
    factors, plus per-feature noise scales.

    Raw tensors are unconstrained; positivity is enforced through softplus
    when the constrained views (``clusters``, ``noise``) are built.
    """

    def __init__(
        self,
        raw_lengthscales: torch.Tensor,
        raw_factors: torch.Tensor,
        raw_noise: torch.Tensor,
        m_features: int,
        families: tuple[str, ...],
    ):
        n_clusters = raw_lengthscales.shape[0]
        packed = m_features * (m_features + 1) // 2
        if raw_factors.shape != (n_clusters, packed):
            raise InputError("raw_factors shape inconsistent with cluster count")
        if raw_noise.shape != (m_features,):
            raise InputError("raw_noise must have one entry per feature")
        if len(families) != n_clusters:
            raise InputError("one kernel family per cluster required")
        self.raw_lengthscales = raw_lengthscales
        self.raw_factors = raw_factors
        self.raw_noise = raw_noise
        self.m_features = m_features
        self.families = tuple(families)

    @classmethod
    def create(
        cls,
        m_features: int,
        lengthscales=(4.0, 32.0),
        noise=0.3,
        diag=1.0,
        off_diag_std=0.05,
        families=None,
        seed=0,
    ) -> "MgpParameters":
        """Fresh parameters; off-diagonal factor entries get small seeded noise
        so the clusters are not exactly exchangeable at init."""
        n_clusters = len(lengthscales)
        families = tuple(families) if families else ("OU",) * n_clusters
        raw_len = softplus_inverse(as_tensor(lengthscales)).clone()
        packed = m_features * (m_features + 1) // 2
        rows, cols = torch.tril_indices(m_features, m_features)
        diag_mask = rows == cols
        gen = generator(seed)
        raw_factors = torch.randn((n_clusters, packed), generator=gen, dtype=DTYPE)
        raw_factors *= off_diag_std
        diag_vals = as_tensor(diag).expand(n_clusters, m_features) if np.ndim(diag) <= 1 else as_tensor(diag)
        raw_factors[:, diag_mask] = softplus_inverse(diag_vals.reshape(n_clusters, m_features))
        raw_noise = softplus_inverse(as_tensor(noise).expand(m_features)).clone()
        params = cls(raw_len, raw_factors, raw_noise, m_features, families)
        params.requires_grad_(True)
        return params

    @classmethod
    def from_values(cls, lengthscales, factors, sigma, families=None) -> "MgpParameters":
        """Exact constrained values -> raw parameters (generators, tests)."""
        factors = [kernels.FeatureCovFactor.from_matrix(f) for f in factors]
        m = factors[0].side
        raw_factors = torch.stack([f.raw_tril for f in factors])
        families = tuple(families) if families else ("OU",) * len(factors)
        return cls(
            softplus_inverse(as_tensor(lengthscales)).clone(),
            raw_factors,
            softplus_inverse(as_tensor(sigma)).clone(),
            m,
            families,
        )

    @property
    def n_clusters(self) -> int:
        return self.raw_lengthscales.shape[0]

    @property
    def lengthscales(self) -> torch.Tensor:
        return softplus(self.raw_lengthscales)

    @property
    def clusters(self):
        scales = self.lengthscales
        return [
            (
                kernels.TimeKernelSpec(self.families[l], scales[l]),
                kernels.FeatureCovFactor(self.raw_factors[l], self.m_features),
            )
            for l in range(self.n_clusters)
        ]

    @property
    def noise(self) -> kernels.NoiseScales:
        return kernels.NoiseScales(self.raw_noise)

    def requires_grad_(self, flag: bool):
        for t in (self.raw_lengthscales, self.raw_factors, self.raw_noise):
            t.requires_grad_(flag)
        return self

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "mgp.raw_lengthscales": self.raw_lengthscales,
            "mgp.raw_factors": self.raw_factors,
            "mgp.raw_noise": self.raw_noise,
        }

    def snapshot(self) -> dict:
        """Detached copy of constrained values, for failure diagnostics."""
        with torch.no_grad():
            return {
                "lengthscales": self.lengthscales.numpy().tolist(),
                "sigma": self.noise.sigma.numpy().tolist(),
                "families": list(self.families),
            }


@dataclass
class PosteriorGaussian:
    """Gaussian over the hourly grid: mean (G,), cov (G, G), with the grid
    index laid out time-major (row j, feature k -> j * M + k) and a mask
    flagging zero-padded leading grid rows."""

    mean: torch.Tensor
    cov: torch.Tensor
    grid: kernels.ObservationIndex
    mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.mask.shape[0]

    @property
    def m_features(self) -> int:
        return self.mean.shape[0] // self.n_rows


@dataclass
class GridSampleBatch:
    """Reparameterized posterior draws arranged for the classifier.

    samples: (S, N, M+Q); masked rows are exactly zero in every channel and
    static features occupy the trailing Q channels of each valid row.
    noise_draws holds the standard-normal draws so gradients flow through
    the posterior mean and Cholesky factor, not the randomness.
    """

    samples: torch.Tensor
    noise_draws: torch.Tensor
    mask: np.ndarray


def build_grid(series, n_grid: int, m_features: int):
    """Hourly grid of ``n_grid`` rows ending at t = 0, plus the padding mask.

    Rows older than the encounter span are masked; a span of s hours keeps
    the last ceil(s) rows (at least one, at most n_grid).
    """
    times = np.asarray(series.times, dtype=np.float64)
    span = float(-times.min()) if times.size else 0.0
    n_valid = min(n_grid, max(1, math.ceil(span - 1e-9)))
    mask = np.zeros(n_grid, dtype=bool)
    mask[: n_grid - n_valid] = True
    grid_times = np.arange(-(n_grid - 1), 1, dtype=np.float64) * GRID_STEP_HOURS
    index = kernels.ObservationIndex(
        np.repeat(grid_times, m_features),
        np.tile(np.arange(m_features, dtype=np.int64), n_grid),
    )
    return index, mask


def _recent_observations(series, cap: int = MAX_OBSERVATIONS):
    times = np.asarray(series.times, dtype=np.float64)
    features = np.asarray(series.features, dtype=np.int64)
    values = np.asarray(series.values, dtype=np.float64)
    if times.size > cap:
        order = np.argsort(times, kind="stable")[-cap:]
        order.sort()
        times, features, values = times[order], features[order], values[order]
    return times, features, values


def posterior(series, params: MgpParameters, n_grid: int = DEFAULT_GRID_SIZE) -> PosteriorGaussian:
    """GP posterior over the hourly grid given one patient's observations.

    With no observations the prior is returned unchanged. Observation times
    must lie in (-inf, 0]; only the most recent 250 points are used.
    """
    times, features, values = _recent_observations(series)
    if times.size and times.max() > 1e-9:
        raise InputError("observation times must not exceed the prediction time 0")
    grid, mask = build_grid(series, n_grid, params.m_features)
    clusters = params.clusters
    if times.size == 0:
        mean = torch.zeros(len(grid), dtype=DTYPE)
        cov = kernels.prior_cov(grid, clusters)
        return PosteriorGaussian(mean, cov, grid, mask)
    obs_index = kernels.ObservationIndex(times, features)
    k_obs = kernels.assemble_observed_cov(obs_index, clusters, params.noise)
    l_obs, _ = kernels.safe_cholesky(k_obs, snapshot=params.snapshot())
    k_cross = kernels.cross_cov(obs_index, grid, clusters)
    v = torch.linalg.solve_triangular(l_obs, k_cross.T, upper=False)
    w = torch.linalg.solve_triangular(l_obs, as_tensor(values).reshape(-1, 1), upper=False)
    mean = (v.T @ w).reshape(-1)
    cov = kernels.prior_cov(grid, clusters) - v.T @ v
    return PosteriorGaussian(mean, cov, grid, mask)


def sample(post: PosteriorGaussian, static, s_count: int, seed: int) -> GridSampleBatch:
    """Draw ``s_count`` reparameterized samples mu + L @ eps on the grid.

    Deterministic for a fixed seed. Static features are broadcast into the
    trailing channels of every valid row; masked rows stay all-zero.
    """
    if s_count < 1:
        raise InputError("s_count must be at least 1")
    n_rows = post.n_rows
    m = post.m_features
    eps = torch.randn((s_count, post.mean.shape[0]), generator=generator(seed), dtype=DTYPE)
    if float(post.cov.detach().abs().max()) == 0.0:
        draws = post.mean.unsqueeze(0).expand(s_count, -1)
    else:
        chol, _ = kernels.safe_cholesky(post.cov)
        draws = post.mean.unsqueeze(0) + eps @ chol.T
    valid = torch.from_numpy(~post.mask).to(DTYPE)
    dynamic = draws.reshape(s_count, n_rows, m) * valid[None, :, None]
    static_t = as_tensor(static).reshape(-1)
    static_block = static_t[None, None, :] * valid[None, :, None]
    samples = torch.cat([dynamic, static_block.expand(s_count, n_rows, -1)], dim=2)
    return GridSampleBatch(samples, eps, post.mask)


def marginal_nll(series, params: MgpParameters) -> torch.Tensor:
    """Per-observation negative log marginal likelihood of one series.

    Used to fit GP hyperparameters directly to data, independent of any
    classifier head.
    """
    times, features, values = _recent_observations(series)
    if times.size == 0:
        raise InputError("marginal likelihood undefined without observations")
    obs_index = kernels.ObservationIndex(times, features)
    k_obs = kernels.assemble_observed_cov(obs_index, params.clusters, params.noise)
    l_obs, _ = kernels.safe_cholesky(k_obs, snapshot=params.snapshot())
    w = torch.linalg.solve_triangular(l_obs, as_tensor(values).reshape(-1, 1), upper=False)
    n = times.size
    nll = 0.5 * (w**2).sum() + torch.log(torch.diagonal(l_obs)).sum()
    nll = nll + 0.5 * n * math.log(2.0 * math.pi)
    return nll / n
