"""Workbench configuration: INI file plus environment variable overrides.

Precedence, lowest to highest: built-in defaults, then the config file,
then ``MICROSEG_<SECTION>_<KEY>`` environment variables. A variable like
``MICROSEG_SERVICE_PORT=9000`` overrides key ``port`` in section
``[service]``.

Sections and keys::

    [service]  host, port, workers, store_root
    [deep]     weights, sidecar, k, j
    [train]    kind, plus any training hyperparameter
               (n_rounds, max_depth, learning_rate, min_child_weight,
                n_trees, rf_max_depth, features_per_split, l2, max_iter, seed)

``sidecar`` is a shell command template with ``{image}`` and ``{out}``
placeholders; it must write an FTS1 feature file to ``{out}``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .classify import KINDS, TrainConfig

_SECTIONS = ("service", "deep", "train")


@dataclass
class WorkbenchConfig:
    host: str = "127.0.0.1"
    port: int = 8750
    workers: int = 2
    store_root: Path = Path("~/.microseg/store")
    weights: Path | None = None
    sidecar: str | None = None
    k: int | None = None
    j: int | None = None
    train_kind: str = "gbt"
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.store_root = Path(self.store_root).expanduser()
        if self.weights is not None:
            self.weights = Path(self.weights).expanduser()
        if self.train_kind not in KINDS:
            raise ValueError(f"unknown train kind {self.train_kind!r}")
        # surfaces typos and type errors at load time, not at first training
        self.train_config()

    def train_config(self, seed: int | None = None, **overrides) -> TrainConfig:
        merged = dict(self.train_overrides)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        if seed is not None:
            merged["seed"] = seed
        base = TrainConfig().to_dict()
        base.update(merged)
        return TrainConfig.from_dict(base)


_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_train_value(key: str, raw: str):
    if key not in _TRAIN_FIELDS:
        raise ValueError(f"unknown training option {key!r}")
    if raw == "" or raw.lower() == "none":
        return None
    kind = _TRAIN_FIELDS[key]
    if "float" in str(kind):
        return float(raw)
    return int(raw)


def _apply(settings: dict, section: str, key: str, raw: str, origin: str):
    if section == "service":
        if key == "host":
            settings["host"] = raw
        elif key == "port":
            settings["port"] = int(raw)
        elif key == "workers":
            settings["workers"] = int(raw)
        elif key == "store_root":
            settings["store_root"] = Path(raw)
        else:
            raise ValueError(f"{origin}: unknown key {key!r} in [service]")
    elif section == "deep":
        if key == "weights":
            settings["weights"] = Path(raw) if raw else None
        elif key == "sidecar":
            settings["sidecar"] = raw or None
        elif key in ("k", "j"):
            settings[key] = int(raw) if raw else None
        else:
            raise ValueError(f"{origin}: unknown key {key!r} in [deep]")
    elif section == "train":
        if key == "kind":
            settings["train_kind"] = raw
        else:
            settings.setdefault("train_overrides", {})[key] = \
                _parse_train_value(key, raw)
    else:
        raise ValueError(f"{origin}: unknown section [{section}]")


def load_config(path=None, env: dict | None = None) -> WorkbenchConfig:
    """Defaults, overlaid by the INI file at `path`, overlaid by environment."""
    settings: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(settings, section.lower(), key.lower(), raw, str(path))

    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith("MICROSEG_"):
            continue
        _, _, rest = name.partition("_")
        section, _, key = rest.partition("_")
        if not key:
            raise ValueError(f"malformed override {name}; expected "
                             "MICROSEG_<SECTION>_<KEY>")
        _apply(settings, section.lower(), key.lower(), raw, name)

    overrides = settings.pop("train_overrides", {})
    config = WorkbenchConfig(**settings)
    config.train_overrides.update(overrides)
    config.train_config()
    return config
