"""Synthetic generation, horizon augmentation, matching, splitting, I/O.

One record is a single patient encounter anchored at its prediction time:
all observation times are non-positive hours. Horizon augmentation clones
an encounter with the last h hours removed and the clock re-anchored, so a
horizon-6 copy predicts six hours earlier than the original.

The on-disk format is JSONL, one patient-horizon record per line:

    {"patient_id": str, "horizon": int, "label": 0|1,
     "static": [q floats],
     "observations": [{"t": float, "f": int, "v": float}]}

with a sidecar JSON describing features, static layout and normalization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import kernels, mgp
from .errors import DataError, InputError
from .seeds import derive

FORMAT_VERSION = 1
DEFAULT_HORIZONS = tuple(range(7))
MIN_OBSERVATIONS = 40
MAX_OBSERVATIONS = 250


@dataclass
class IrregularSeries:
    """One patient encounter: sparse observations plus static features."""

    patient_id: str
    times: np.ndarray
    features: np.ndarray
    values: np.ndarray
    static: np.ndarray
    label: int
    horizon: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.static = np.asarray(self.static, dtype=np.float64)
        if not (self.times.shape == self.features.shape == self.values.shape):
            raise InputError("times, features and values must have equal length")
        if self.times.size:
            if not np.all(np.isfinite(self.times)) or not np.all(np.isfinite(self.values)):
                raise InputError("observations must be finite")
            if self.times.max() > 1e-9:
                raise InputError("observation times must be <= 0 (hours before prediction)")
            if self.features.min() < 0:
                raise InputError("feature ids must be non-negative")
            order = np.lexsort((self.features, self.times))
            self.times = self.times[order]
            self.features = self.features[order]
            self.values = self.values[order]
        if self.label not in (0, 1):
            raise InputError("label must be 0 or 1")
        if not 0 <= self.horizon <= 6:
            raise InputError("horizon must lie in [0, 6]")

    @property
    def n_obs(self) -> int:
        return int(self.times.size)

    @property
    def span(self) -> float:
        """Hours from the first observation to the prediction time."""
        return float(-self.times.min()) if self.times.size else 0.0


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray
    static_dim: int | None = None  # index of the standardized static slot (age)
    static_mean: float = 0.0
    static_std: float = 1.0

    def to_dict(self) -> dict:
        return {
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "static_dim": self.static_dim,
            "static_mean": float(self.static_mean),
            "static_std": float(self.static_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["std"], dtype=np.float64),
            d.get("static_dim"),
            float(d.get("static_mean", 0.0)),
            float(d.get("static_std", 1.0)),
        )


@dataclass
class DatasetSplits:
    train: list
    validation: list
    test: list
    normalization: Normalization

    @property
    def m_features(self) -> int:
        return int(self.normalization.mean.shape[0])

    def all_series(self):
        return self.train + self.validation + self.test


def truncate_to_recent(series: IrregularSeries, cap: int = MAX_OBSERVATIONS) -> IrregularSeries:
    """Keep only the most recent ``cap`` observations."""
    if series.n_obs <= cap:
        return series
    return replace(
        series,
        times=series.times[-cap:],
        features=series.features[-cap:],
        values=series.values[-cap:],
    )


def horizon_augment(series: IrregularSeries, horizons=DEFAULT_HORIZONS, min_obs: int = MIN_OBSERVATIONS):
    """Copies with the last h hours removed and the clock re-anchored.

    Copies falling under ``min_obs`` observations are dropped; the result
    may be empty. Observation counts are non-increasing in h.
    """
    out = []
    for h in horizons:
        keep = series.times <= -h + 1e-9
        if int(keep.sum()) < min_obs:
            continue
        out.append(
            replace(
                series,
                times=series.times[keep] + h,
                features=series.features[keep],
                values=series.values[keep],
                horizon=int(h),
            )
        )
    return out


def match_controls(
    cases,
    controls,
    seed: int,
    min_obs: int = MIN_OBSERVATIONS,
    max_obs: int = MAX_OBSERVATIONS,
):
    """Length-match controls to cases so duration cannot separate classes.

    Each control is paired with a uniformly drawn case (with replacement)
    and truncated to the case's observation-window length counted from the
    control's own first observation; the last kept observation becomes the
    control's new prediction time. Short controls are dropped, long ones
    capped at ``max_obs`` most recent points.
    """
    if not cases or not controls:
        raise InputError("matching needs at least one case and one control")
    rng = np.random.default_rng(seed)
    assignment = rng.integers(0, len(cases), size=len(controls))
    matched = []
    for control, case_index in zip(controls, assignment):
        window = cases[case_index].span
        start = control.times.min()
        keep = control.times <= start + window + 1e-9
        kept_times = control.times[keep]
        anchor = kept_times.max()
        candidate = replace(
            control,
            times=kept_times - anchor,
            features=control.features[keep],
            values=control.values[keep],
        )
        candidate = truncate_to_recent(candidate, max_obs)
        if candidate.n_obs >= min_obs:
            matched.append(candidate)
    return matched


def oversample_minority(series_list, seed: int):
    """Resample the smaller class with replacement until the classes match;
    training-set balancing for whole-dataset fits (never applied to
    validation or test)."""
    cases = [s for s in series_list if s.label == 1]
    controls = [s for s in series_list if s.label == 0]
    if not cases or not controls:
        raise InputError("oversampling needs both classes")
    minority, majority = (cases, controls) if len(cases) < len(controls) else (controls, cases)
    rng = np.random.default_rng(seed)
    extra = [minority[i] for i in rng.integers(0, len(minority), size=len(majority) - len(minority))]
    balanced = majority + minority + extra
    order = rng.permutation(len(balanced))
    return [balanced[i] for i in order]


def split_normalize(all_series, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplits:
    """Patient-level 80/10/10 split plus train-only standardization.

    All horizon copies of a patient land in the same split, so augmented
    twins can never leak across splits. Dynamic features are standardized
    per feature id with train statistics; the first static slot (age by
    convention) is standardized the same way.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise InputError("fractions must be non-negative and sum to 1")
    patient_ids = sorted({s.patient_id for s in all_series})
    if len(patient_ids) < 10:
        raise DataError(f"need at least 10 patients to split, got {len(patient_ids)}")
    rng = np.random.default_rng(seed)
    shuffled = [patient_ids[i] for i in rng.permutation(len(patient_ids))]
    n = len(shuffled)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    assignment = {}
    for rank, pid in enumerate(shuffled):
        assignment[pid] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")
    buckets = {"train": [], "validation": [], "test": []}
    for s in all_series:
        buckets[assignment[s.patient_id]].append(s)

    m_features = int(max(s.features.max() for s in all_series if s.n_obs)) + 1
    mean = np.zeros(m_features)
    std = np.ones(m_features)
    train_values = [[] for _ in range(m_features)]
    for s in buckets["train"]:
        for f in range(m_features):
            sel = s.features == f
            if sel.any():
                train_values[f].append(s.values[sel])
    for f in range(m_features):
        if train_values[f]:
            stacked = np.concatenate(train_values[f])
            mean[f] = stacked.mean()
            std[f] = max(float(stacked.std()), 1e-6)

    q = all_series[0].static.shape[0]
    norm = Normalization(mean, std)
    if q >= 1:
        ages = np.array([s.static[0] for s in buckets["train"]])
        norm.static_dim = 0
        norm.static_mean = float(ages.mean())
        norm.static_std = max(float(ages.std()), 1e-6)

    def apply(s: IrregularSeries) -> IrregularSeries:
        values = (s.values - mean[s.features]) / std[s.features]
        static = s.static.copy()
        if norm.static_dim is not None:
            static[norm.static_dim] = (static[norm.static_dim] - norm.static_mean) / norm.static_std
        return replace(s, values=values, static=static)

    return DatasetSplits(
        [apply(s) for s in buckets["train"]],
        [apply(s) for s in buckets["validation"]],
        [apply(s) for s in buckets["test"]],
        norm,
    )


# ----------------------------------------------------------------------
# synthetic generator


def default_generator_params(m_vitals: int, m_labs: int, lengthscales=(2.0, 64.0)) -> mgp.MgpParameters:
    """Two smoothness clusters: a fast one dominated by vitals and a slow
    one dominated by labs, with vitals carrying the larger noise."""
    diag_fast = [1.0] * m_vitals + [0.15] * m_labs
    diag_slow = [0.2] * m_vitals + [1.0] * m_labs
    sigma = [0.4] * m_vitals + [0.15] * m_labs
    return mgp.MgpParameters.from_values(
        lengthscales, [np.diag(diag_fast), np.diag(diag_slow)], sigma
    )


def generate_synthetic(
    n_patients: int,
    m_vitals: int,
    m_labs: int,
    true_params: mgp.MgpParameters | None = None,
    label_effect: float = 3.0,
    seed: int = 0,
    case_fraction: float = 0.5,
    span_hours=(10.0, 48.0),
    vitals_per_hour: float = 1.0,
    labs_per_hour: float = 0.125,
    drift_window: float = 14.0,
    drift_weights: dict | None = None,
    admission_units: int = 2,
):
    """Draw encounters from the GP prior with a label-dependent drift.

    Cases receive ``label_effect`` times the per-feature drift weight,
    ramping linearly over the final ``drift_window`` hours before onset.
    The default weights (+1 on vital 0, -1 on vital 1) sum to zero, so the
    drift is invisible to any detector that pools features uniformly.
    Returns (series list, ground-truth dict) and is byte-reproducible for
    a fixed seed.
    """
    m = m_vitals + m_labs
    if m < 1:
        raise InputError("need at least one dynamic feature")
    if true_params is None:
        true_params = default_generator_params(m_vitals, m_labs)
    if drift_weights is None:
        drift_weights = {0: 1.0, 1: -1.0} if m_vitals >= 2 else {0: 1.0}
    weight_vec = np.zeros(m)
    for f, w in drift_weights.items():
        weight_vec[int(f)] = float(w)
    clusters = true_params.clusters
    sigma = true_params.noise.sigma.detach().numpy()
    rates = np.array([vitals_per_hour] * m_vitals + [labs_per_hour] * m_labs)

    series_list = []
    patients = []
    for i in range(n_patients):
        rng = np.random.default_rng(derive(seed, "patient", i))
        label = int(rng.random() < case_fraction)
        span = float(rng.uniform(*span_hours))
        times, feats = [], []
        for f in range(m):
            count = rng.poisson(rates[f] * span)
            times.append(rng.uniform(-span, 0.0, size=count))
            feats.append(np.full(count, f, dtype=np.int64))
        times = np.concatenate(times)
        feats = np.concatenate(feats)
        order = np.lexsort((feats, times))
        times, feats = times[order], feats[order]
        n_obs = times.size
        if n_obs:
            index = kernels.ObservationIndex(times, feats)
            with torch.no_grad():
                cov = kernels.prior_cov(index, clusters).numpy()
            chol = np.linalg.cholesky(cov + 1e-9 * np.eye(n_obs))
            latent = chol @ rng.standard_normal(n_obs)
            values = latent + rng.standard_normal(n_obs) * sigma[feats]
            if label:
                ramp = np.clip(1.0 + times / drift_window, 0.0, 1.0)
                values = values + label_effect * weight_vec[feats] * ramp
        else:
            values = np.zeros(0)
        age = float(rng.normal(65.0, 15.0))
        gender = float(rng.integers(0, 2))
        unit = int(rng.integers(0, admission_units))
        one_hot = [1.0 if u == unit else 0.0 for u in range(admission_units)]
        static = np.array([age, gender, *one_hot])
        pid = f"p{i:05d}"
        series_list.append(IrregularSeries(pid, times, feats, values, static, label))
        patients.append({"patient_id": pid, "label": label, "span": span, "n_obs": int(n_obs)})

    truth = {
        "format_version": FORMAT_VERSION,
        "lengthscales": true_params.lengthscales.detach().numpy().tolist(),
        "sigma": sigma.tolist(),
        "factors": [f.factor.detach().numpy().tolist() for _, f in clusters],
        "label_effect": label_effect,
        "drift_weights": {str(k): float(v) for k, v in drift_weights.items()},
        "drift_window": drift_window,
        "m_vitals": m_vitals,
        "m_labs": m_labs,
        "patients": patients,
    }
    return series_list, truth


def feature_names(m_vitals: int, m_labs: int) -> dict[int, str]:
    names = {f: f"vital_{f}" for f in range(m_vitals)}
    names.update({m_vitals + j: f"lab_{j}" for j in range(m_labs)})
    return names


def static_names(admission_units: int) -> list[str]:
    return ["age", "gender", *[f"unit_{u}" for u in range(admission_units)]]


def dataset_statistics(series_list) -> list[dict]:
    """Per-horizon counts and observations-per-record mean/std."""
    rows = []
    for h in DEFAULT_HORIZONS:
        subset = [s for s in series_list if s.horizon == h]
        counts = np.array([s.n_obs for s in subset])
        rows.append(
            {
                "horizon": h,
                "n_series": len(subset),
                "n_cases": sum(s.label for s in subset),
                "n_controls": sum(1 - s.label for s in subset),
                "obs_mean": float(counts.mean()) if len(subset) else 0.0,
                "obs_std": float(counts.std()) if len(subset) else 0.0,
            }
        )
    return rows


# ----------------------------------------------------------------------
# JSONL and sidecar I/O

_RECORD_KEYS = {"patient_id", "horizon", "label", "static", "observations"}


def write_jsonl(path, series_list):
    with open(path, "w", encoding="utf-8") as f:
        for s in series_list:
            record = {
                "patient_id": s.patient_id,
                "horizon": int(s.horizon),
                "label": int(s.label),
                "static": [float(x) for x in s.static],
                "observations": [
                    {"t": float(t), "f": int(k), "v": float(v)}
                    for t, k, v in zip(s.times, s.features, s.values)
                ],
            }
            f.write(json.dumps(record) + "\n")


def read_jsonl(path):
    series_list = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            if set(record) != _RECORD_KEYS:
                raise DataError(f"{path}:{line_no}: keys {sorted(record)} do not match the schema")
            obs = record["observations"]
            try:
                series = IrregularSeries(
                    str(record["patient_id"]),
                    np.array([o["t"] for o in obs], dtype=np.float64),
                    np.array([o["f"] for o in obs], dtype=np.int64),
                    np.array([o["v"] for o in obs], dtype=np.float64),
                    np.asarray(record["static"], dtype=np.float64),
                    int(record["label"]),
                    int(record["horizon"]),
                )
            except (InputError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
            series_list.append(series)
    return series_list


def write_sidecar(path, m_features, q_static, names, statics, normalization: Normalization):
    payload = {
        "format_version": FORMAT_VERSION,
        "m_features": int(m_features),
        "q_static": int(q_static),
        "feature_names": {str(k): v for k, v in names.items()},
        "static_names": list(statics),
        "normalization": normalization.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_sidecar(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read sidecar {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported sidecar format_version")
    return payload


def save_dataset(directory, splits: DatasetSplits, names, statics, truth=None, stats_rows=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl(directory / "train.jsonl", splits.train)
    write_jsonl(directory / "validation.jsonl", splits.validation)
    write_jsonl(directory / "test.jsonl", splits.test)
    q = splits.train[0].static.shape[0] if splits.train else 0
    write_sidecar(directory / "features.json", splits.m_features, q, names, statics, splits.normalization)
    if truth is not None:
        with open(directory / "truth.json", "w", encoding="utf-8") as f:
            json.dump(truth, f, indent=2, sort_keys=True)
            f.write("\n")
    if stats_rows is not None:
        with open(directory / "stats.csv", "w", encoding="utf-8") as f:
            cols = ["horizon", "n_series", "n_cases", "n_controls", "obs_mean", "obs_std"]
            f.write(",".join(cols) + "\n")
            for row in stats_rows:
                f.write(",".join(str(row[c]) for c in cols) + "\n")


def load_dataset(directory):
    """Read the three split files plus the sidecar; returns (splits, sidecar)."""
    directory = Path(directory)
    sidecar = read_sidecar(directory / "features.json")
    normalization = Normalization.from_dict(sidecar["normalization"])
    parts = {}
    for name in ("train", "validation", "test"):
        path = directory / f"{name}.jsonl"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        parts[name] = read_jsonl(path)
    splits = DatasetSplits(parts["train"], parts["validation"], parts["test"], normalization)
    for s in splits.all_series():
        if s.n_obs and s.features.max() >= splits.m_features:
            raise DataError(f"series {s.patient_id} references feature {s.features.max()} outside the dictionary")
    return splits, sidecar
