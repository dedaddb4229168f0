import numpy as np
import pytest
import torch

from mgp_atttcn import data, mgp


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


def random_clusters(rng, m, n_clusters=2, families=("OU", "OU")):
    """Matched (package params, oracle clusters) for a random model."""
    lengthscales = rng.uniform(0.5, 8.0, size=n_clusters)
    factors = []
    for _ in range(n_clusters):
        f = np.tril(rng.normal(0, 0.4, size=(m, m)))
        np.fill_diagonal(f, rng.uniform(0.3, 1.5, size=m))
        factors.append(f)
    sigma = rng.uniform(0.1, 0.6, size=m)
    params = mgp.MgpParameters.from_values(lengthscales, factors, sigma, families=families[:n_clusters])
    oracle = [
        (families[l], lengthscales[l], factors[l] @ factors[l].T) for l in range(n_clusters)
    ]
    return params, oracle, sigma


def make_series(rng, m, n_obs, span=10.0, label=None, static=()):
    times = -rng.uniform(0, span, size=n_obs)
    times[rng.integers(0, n_obs)] = 0.0  # anchor at prediction time
    feats = rng.integers(0, m, size=n_obs)
    values = rng.normal(0, 1, size=n_obs)
    label = int(rng.integers(0, 2)) if label is None else label
    return data.IrregularSeries(
        f"p{rng.integers(0, 10**6):06d}", times, feats, values, np.asarray(static, dtype=float), label, 0
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    """~60 patients, 3 dynamic features, horizons 0-2; fast to train on."""
    series, _ = data.generate_synthetic(
        60, 2, 1, label_effect=3.0, seed=11, span_hours=(8.0, 20.0), drift_window=10.0
    )
    cases = [s for s in series if s.label == 1]
    controls = [s for s in series if s.label == 0]
    matched = data.match_controls(cases, controls, seed=5, min_obs=20)
    augmented = [c for s in cases + matched for c in data.horizon_augment(s, range(3), min_obs=20)]
    return data.split_normalize(augmented, seed=3)
