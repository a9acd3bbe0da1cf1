"""One YAML file drives every command.

Each section maps onto a library dataclass, so the defaults live in one
place. Unknown keys and invalid values raise :class:`ConfigError` with the
dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import dynamics as dyn
from .ionet import NetConfig
from .mpc import CostWeights
from .sensors import NoiseModel, SensorNoise, WindEvent, g365_accel, g365_gyro
from .simulation import PlantConfig
from .trainer import METHODS, Environment, TrainConfig

OUTPUT_ENV = "IMPC_OUTPUT_DIR"
ECHO_NAME = "effective-config.yaml"


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class MpcSection:
    horizon: int = 10
    dt: float = 0.02

    def __post_init__(self):
        if self.horizon < 2 or self.dt <= 0:
            raise ValueError("horizon must be >= 2 and dt positive")


@dataclass
class NoiseSection:
    gyro: SensorNoise = field(default_factory=g365_gyro)
    accel: SensorNoise = field(default_factory=g365_accel)
    bias_seed: int = 7


@dataclass
class WindSection:
    """Shape of the disturbances in the wind grid and threshold search."""

    start: float = 0.5
    duration: float = 0.3
    direction: tuple = (-1.0, 0.0, 0.0)
    cd: float = 1.0
    rho: float = 1.225
    area: float = 0.1
    lever: float = 0.02

    def event(self, kind: str, speed: float) -> WindEvent:
        return WindEvent(kind=kind, start=self.start, duration=self.duration, speed=speed,
                         direction=self.direction, cd=self.cd, rho=self.rho, area=self.area, lever=self.lever)

    def __post_init__(self):
        self.event("step", 0.0)   # validates


@dataclass
class EvaluationSection:
    checkpoint: str = "best.json"          # relative paths resolve against the output dir
    methods: tuple = METHODS
    init_degs: tuple = (10.0, 15.0, 20.0)
    wind_kinds: tuple = ("impulse", "step")
    wind_speeds: tuple = (10.0, 15.0, 20.0)
    trials: int = 10
    seed0: int = 2001
    duration: float = 3.0
    workers: int = 1

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.trials < 1 or self.workers < 1:
            raise ValueError("trials and workers must be >= 1")
        if self.duration <= 0.5:
            raise ValueError("duration must exceed 0.5 s")


@dataclass
class ThresholdSection:
    kinds: tuple = ("impulse", "step")
    method: str = "iMPC"
    cap: float = 1000.0
    resolution: float = 1.0
    duration: float = 2.0
    seed: int = 2001

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.cap <= 0 or self.resolution <= 0:
            raise ValueError("cap and resolution must be positive")
        for k in self.kinds:
            if k not in ("impulse", "step"):
                raise ValueError(f"unknown wind kind {k!r}")


@dataclass
class Config:
    seed: int = 0
    output_dir: str = "runs/default"
    vehicle: dyn.VehicleParams = field(default_factory=dyn.VehicleParams)
    bounds: dyn.ControlBounds = field(default_factory=dyn.ControlBounds)
    cost: CostWeights = field(default_factory=CostWeights)
    mpc: MpcSection = field(default_factory=MpcSection)
    plant: PlantConfig = field(default_factory=PlantConfig)
    noise: NoiseSection = field(default_factory=NoiseSection)
    network: NetConfig = field(default_factory=NetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    wind: WindSection = field(default_factory=WindSection)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)

    def environment(self) -> Environment:
        n = self.noise
        return Environment(self.vehicle, self.bounds, self.cost, self.mpc.horizon, self.mpc.dt, self.plant,
                           NoiseModel(n.gyro, n.accel, bias_seed=n.bias_seed))

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.training, seed=self.seed)


# the global seed is the only seed; training.seed would shadow it
_EXCLUDED = {TrainConfig: {"seed"}}


def _init_fields(cls):
    skip = _EXCLUDED.get(cls, set())
    return {f.name: f for f in dataclasses.fields(cls) if f.init and f.name not in skip}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    fields = _init_fields(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else str(unknown[0])
        raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(fields))})")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        default = _default(f)
        if name not in data:
            if default is dataclasses.MISSING:
                raise ConfigError(sub, "required")
            continue
        value = data[name]
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def parse_config(data) -> Config:
    return _build(Config, data, "")


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("", f"cannot parse {p}: {e}") from None
    cfg = parse_config(data)
    if abs(cfg.mpc.dt - cfg.plant.control_dt) > 1e-12:
        raise ConfigError("mpc.dt", f"must equal plant.control_dt ({cfg.plant.control_dt})")
    return cfg


def to_plain(obj):
    """Nested dicts / lists / scalars of the init fields (YAML friendly)."""
    if dataclasses.is_dataclass(obj):
        return {name: to_plain(getattr(obj, name)) for name in _init_fields(type(obj))}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(to_plain(cfg), sort_keys=False)


def resolve_output_dir(cfg: Config, override=None) -> Path:
    """Flag beats the environment variable, which beats the config file."""
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def echo_config(cfg: Config, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / ECHO_NAME
    p.write_text(dump_config(cfg))
    return p
