"""AUROC / AUPR with bootstrap uncertainty and per-horizon reporting."""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError
from .seeds import derive

HORIZONS = tuple(range(7))


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random case outranks a random control, ties at 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Area under the precision-recall step curve, thresholds descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # one operating point per distinct threshold (last index of each tie group)
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([boundary, [scores.shape[0] - 1]])
    precision = tp[cut] / (tp[cut] + fp[cut])
    recall = tp[cut] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def bootstrap(metric, scores, labels, n: int = 200, seed: int = 0, max_retries: int = 100):
    """Mean and sample std of a metric over n resamples with replacement.

    Resamples where the metric is undefined (single class drawn) are
    redrawn; after ``max_retries`` failures the error propagates.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if n < 2:
        raise UndefinedMetricError("bootstrap needs n >= 2 resamples")
    size = scores.shape[0]
    values = np.empty(n)
    for i in range(n):
        for attempt in range(max_retries):
            rng = np.random.default_rng(derive(seed, "boot", i, attempt))
            idx = rng.integers(0, size, size=size)
            try:
                values[i] = metric(scores[idx], labels[idx])
                break
            except UndefinedMetricError:
                if attempt == max_retries - 1:
                    raise
    return float(values.mean()), float(values.std(ddof=1))


def metric_report(scores, labels, horizons, n_boot: int = 200, seed: int = 0) -> list[dict]:
    """Per-horizon AUROC/AUPR with bootstrap mean +- std and class counts.

    Horizons with no records, or where a metric is undefined, report null
    metric entries rather than failing the whole run.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    horizons = np.asarray(horizons)
    rows = []
    for h in HORIZONS:
        sel = horizons == h
        row = {
            "format_version": 1,
            "horizon": int(h),
            "auroc": None,
            "aupr": None,
            "n_cases": int((labels[sel] == 1).sum()),
            "n_controls": int((labels[sel] == 0).sum()),
        }
        if sel.any():
            try:
                mean, std = bootstrap(auroc, scores[sel], labels[sel], n_boot, derive(seed, "auroc", h))
                row["auroc"] = {"mean": mean, "std": std}
            except UndefinedMetricError:
                pass
            try:
                mean, std = bootstrap(aupr, scores[sel], labels[sel], n_boot, derive(seed, "aupr", h))
                row["aupr"] = {"mean": mean, "std": std}
            except UndefinedMetricError:
                pass
        rows.append(row)
    return rows
