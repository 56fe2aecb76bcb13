"""Experiment configuration: YAML files plus dotted ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .grid import CYCLIC, GLOBAL, Grid
from .letkf import LetkfConfig

OUTPUT_ROOT_ENV = "LETKFLAB_OUTPUT_ROOT"


@dataclass
class ModelSpec:
    kind: str = "lorenz96"
    params: dict = field(default_factory=dict)
    # overrides applied to ``params`` for the nature run only (model-error twins)
    truth_params: dict = field(default_factory=dict)


@dataclass
class NetworkSpec:
    n_stations: int = 40
    seed: int = 1
    layout: str = "regular"
    file: str | None = None


@dataclass
class SeedSpec:
    nature: int = 0
    obs: int = 1
    ensemble: int = 2


@dataclass
class DivergenceSpec:
    window: int = 20
    factor: float = 0.9


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: ModelSpec = field(default_factory=ModelSpec)
    grid: dict | None = None
    ensemble_size: int = 20
    n_cycles: int = 200
    spinup_cycles: int = 1100
    network: NetworkSpec = field(default_factory=NetworkSpec)
    obs_errors: dict = field(
        default_factory=lambda: {"U": 1.0, "V": 1.0, "T": 1.0, "Q": 1.0e-4, "Ps": 1.0, "X": 1.0}
    )
    obs_noise_free: bool = False
    letkf: LetkfConfig = field(default_factory=LetkfConfig)
    seeds: SeedSpec = field(default_factory=SeedSpec)
    output_dir: str = "experiment"
    free_run: bool = False
    keep_every: int = 4
    workers: int = 1
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    verification_start: float = 0.5
    weighted_rmse: bool = True

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ConfigError("ensemble_size must be >= 2")
        if self.n_cycles < 1:
            raise ConfigError("n_cycles must be >= 1")
        if self.spinup_cycles < 0:
            raise ConfigError("spinup_cycles must be >= 0")
        if self.keep_every < 1 or self.workers < 1:
            raise ConfigError("keep_every and workers must be >= 1")
        if not 0.0 <= self.verification_start < 1.0:
            raise ConfigError("verification_start must lie in [0, 1)")
        if self.model.kind not in ("lorenz96", "advection"):
            raise ConfigError(f"unknown model kind {self.model.kind!r}")

    def build_grid(self):
        if self.model.kind == "lorenz96":
            n = int(self.model.params.get("n_sites", 40))
            if self.grid and (self.grid.get("kind", CYCLIC) != CYCLIC or int(self.grid.get("n_lon", n)) != n):
                raise ConfigError("lorenz96 needs a cyclic-1d grid with n_lon == n_sites")
            return Grid.cyclic(n)
        spec = {"kind": GLOBAL, **(self.grid or {})}
        try:
            return Grid(
                kind=spec["kind"],
                n_lon=int(spec.get("n_lon", 64)),
                n_lat=int(spec.get("n_lat", 32)),
                **({"levels": tuple(spec["levels"])} if "levels" in spec else {}),
                **({"variables": tuple(spec["variables"])} if "variables" in spec else {}),
            )
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad grid spec: {exc}") from exc

    def output_path(self):
        p = Path(self.output_dir)
        if not p.is_absolute():
            p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
        return p


_NESTED = {
    "model": ModelSpec,
    "network": NetworkSpec,
    "letkf": LetkfConfig,
    "seeds": SeedSpec,
    "divergence": DivergenceSpec,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(config):
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else _plain(v)
    return out


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        sub = _NESTED.get(f.name) if cls is ExperimentConfig else None
        kw[f.name] = _build(sub, v, f"{where}.{f.name}") if sub else v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data):
    return _build(ExperimentConfig, data or {}, "config")


def dumps(config):
    return yaml.safe_dump(to_dict(config), sort_keys=False, default_flow_style=False)


def loads(text):
    try:
        return from_dict(yaml.safe_load(text) or {})
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc


def load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def parse_value(text):
    """YAML scalar parsing, plus ``inf``/``-inf`` spelled plainly."""
    if text.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if text.strip().lower() == "-inf":
        return -math.inf
    return yaml.safe_load(text)


def apply_overrides(config, overrides):
    """Apply ``["a.b=1", ...]`` to a config, returning a new config."""
    data = to_dict(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        set_path(data, key.strip(), parse_value(raw))
    return from_dict(data)


def set_path(data, key, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a mapping")
    node[parts[-1]] = value


PRESETS = {
    "lorenz96": {
        "name": "lorenz96-twin",
        "model": {"kind": "lorenz96", "params": {"F": 8.0, "n_sites": 40}},
        "ensemble_size": 20,
        "n_cycles": 2000,
        "spinup_cycles": 1100,
        "network": {"n_stations": 40, "seed": 1, "layout": "regular"},
        "letkf": {"L_h": 4.0, "L_v": 1.0, "inflation": "adaptive"},
        "output_dir": "lorenz96-twin",
    },
    "global": {
        "name": "global-advection",
        "model": {"kind": "advection", "params": {"damping": 0.0}},
        "grid": {"kind": GLOBAL, "n_lon": 64, "n_lat": 32},
        "ensemble_size": 20,
        "n_cycles": 200,
        "spinup_cycles": 1100,
        "network": {"n_stations": 50, "seed": 1, "layout": "stratified"},
        "letkf": {"L_h": 600.0, "L_v": 1.0, "inflation": "adaptive"},
        "output_dir": "global-advection",
    },
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(PRESETS[name])
