"""Multitask-GP interpolation with an attention TCN classifier for sparse,
irregularly sampled multivariate time series, plus the matching baselines,
synthetic data pipeline and evaluation tooling."""

__version__ = "0.1.0"

from . import atttcn, baselines, data, eval_metrics, kernels, mgp, model, training  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    DataError,
    InputError,
    MgpAttTcnError,
    NumericalError,
    UndefinedMetricError,
)
