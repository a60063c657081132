"""TOML run configuration: one section per pipeline stage, flags override file values."""
from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, fields

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .adapt import ArchConfig, TrainConfig
from .errors import ConfigInvalid, InvalidConfig
from .synth import SynthConfig

CONFIG_ENV = "FADACS_CONFIG"

SECTIONS = {
    "synth": SynthConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
}

# free-form sections: name -> {key: default}
PLAIN = {
    "ingest": {"schema": "rye", "tz": "Australia/Melbourne"},
    "cluster": {"method": "sector", "threshold_m": None, "region": None},
    "featurize": {"interval_min": 5, "month_of_year": False},
    "experiment": {"lookback": 6, "horizons": [1, 3, 6], "horizon": 1, "transfer_epochs": 10,
                   "fractions": [0.7, 0.15, 0.15], "model": "ConvLSTM", "grid_search": False},
}

def load_config(path=None):
    """Parse ``path`` (or ``$FADACS_CONFIG``) into a nested dict; missing file means no overrides."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    unknown = set(raw) - set(SECTIONS) - set(PLAIN)
    if unknown:
        raise ConfigInvalid(f"unknown config sections {sorted(unknown)}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigInvalid(f"[{name}] must be a table")
        allowed = {f.name for f in fields(SECTIONS[name])} if name in SECTIONS else set(PLAIN[name])
        bad = set(section) - allowed
        if bad:
            raise ConfigInvalid(f"unknown keys in [{name}]: {sorted(bad)}")
    return raw


def section(cfg, name, overrides=None):
    """Merge file values and non-``None`` flag overrides for one section."""
    merged = dict(PLAIN.get(name, {}))
    merged.update(cfg.get(name, {}))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if name not in SECTIONS:
        return merged
    kind = SECTIONS[name]
    names = {f.name for f in fields(kind)}
    try:
        if kind is SynthConfig:
            return SynthConfig.from_dict({k: v for k, v in merged.items() if k in names})
        obj = kind(**{k: v for k, v in merged.items() if k in names})
        obj.validate()
        return obj
    except (TypeError, ValueError, InvalidConfig) as exc:
        raise ConfigInvalid(f"[{name}]: {exc}") from exc


def config_hash(obj):
    """sha256 of the canonical JSON of ``obj`` (dataclasses are converted first)."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()
