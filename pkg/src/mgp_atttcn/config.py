"""Run configuration: a plain-text INI file with one section per command.

Unknown keys are rejected, all referenced input paths are checked before
any work starts, and `--seed/--threads/--out` override the [common]
section from the command line.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _float_list(text: str):
    return tuple(float(part) for part in text.split(",") if part.strip())


def _int_list(text: str):
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text: str):
    return tuple(part.strip() for part in text.split(",") if part.strip())


# key -> (parser, default); default None with no parser means "required"
_COMMON = {
    "seed": (int, 0),
    "threads": (int, 1),
    "out_dir": (str, "runs/out"),
}

_GENERATE = {
    "n_patients": (int, 200),
    "m_vitals": (int, 4),
    "m_labs": (int, 2),
    "case_fraction": (float, 0.5),
    "label_effect": (float, 3.0),
    "span_min_hours": (float, 10.0),
    "span_max_hours": (float, 48.0),
    "vitals_per_hour": (float, 1.0),
    "labs_per_hour": (float, 0.125),
    "drift_window_hours": (float, 14.0),
    "admission_units": (int, 2),
    "lengthscales": (_float_list, (2.0, 64.0)),
    "min_observations": (int, 40),
    "max_observations": (int, 250),
    "max_horizon": (int, 6),
}

_TRAIN = {
    "data_dir": (str, None),
    "s_count": (int, 8),
    "batch_size": (int, 64),
    "max_epochs": (int, 50),
    "learning_rate": (float, 1e-3),
    "ablation": (str, "full"),
    "kernel_size": (int, 3),
    "n_blocks": (int, 2),
    "hidden_channels": (int, 16),
    "dropout": (float, 0.1),
    "l2": (float, 1e-4),
    "patience": (int, 10),
    "n_grid": (int, 25),
    "init_lengthscales": (_float_list, (4.0, 32.0)),
    "init_noise": (float, 0.3),
    "mc_seed_mode": (str, "per_epoch"),
    "freeze_mgp": (_bool, False),
    "eval_s_count": (int, 0),
    "search_trials": (int, 0),
    "resume": (str, ""),
}

_EVALUATE = {
    "data_dir": (str, None),
    "checkpoint": (str, None),
    "split": (str, "test"),
    "s_count": (int, 8),
    "bootstrap_n": (int, 200),
}

_EXPLAIN = {
    "data_dir": (str, None),
    "checkpoint": (str, None),
    "patient_id": (str, None),
    "horizon": (int, 0),
    "s_count": (int, 8),
}

_BASELINES = {
    "data_dir": (str, None),
    "models": (_str_list, ("logreg", "insight")),
    "n_hours": (int, 25),
    "l2": (float, 1e-3),
    "insight_required": (_int_list, ()),  # empty -> every dynamic feature
    "bootstrap_n": (int, 200),
    "export_features": (_bool, False),
}

SCHEMAS = {
    "common": _COMMON,
    "generate": _GENERATE,
    "train": _TRAIN,
    "evaluate": _EVALUATE,
    "explain": _EXPLAIN,
    "baselines": _BASELINES,
}


@dataclass
class RunConfig:
    path: Path
    sections: dict

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise ConfigError(f"{self.path}: missing [{name}] section")
        return self.sections[name]

    @property
    def seed(self) -> int:
        return self.sections["common"]["seed"]

    @property
    def threads(self) -> int:
        return self.sections["common"]["threads"]

    @property
    def out_dir(self) -> Path:
        return Path(self.sections["common"]["out_dir"])


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    sections = {}
    for section in parser.sections():
        if section not in SCHEMAS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        schema = SCHEMAS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            cast = schema[key][0]
            try:
                values[key] = cast(raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
        sections[section] = values

    sections.setdefault("common", {})
    for key, value in (overrides or {}).items():
        if value is not None:
            sections["common"][key] = value

    # fill defaults and check required keys for the sections present
    for name, values in sections.items():
        for key, (_, default) in SCHEMAS[name].items():
            if key not in values:
                if default is None:
                    raise ConfigError(f"{path}: [{name}] requires key {key!r}")
                values[key] = default
    return RunConfig(path, sections)


def require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"{what} directory {path} does not exist")
    return path


def require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} file {path} does not exist")
    return path
