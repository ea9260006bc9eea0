"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected.

Defaults are the full-scale training recipe (100 ANN epochs of SGD at 0.01,
100 SNN epochs of Adam at 1e-4, 6-bit weights, 5 timesteps, gamma 0.3,
calibration on 50 samples over 100 steps at the 99.7th percentile x 0.8).
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from qstdb.errors import ConfigurationError


@dataclass
class SyntheticConfig:
    classes: int = 3
    bands: int = 16
    samples_per_class: int = 100
    noise_sigma: float = 0.3


@dataclass
class DatasetConfig:
    path: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    patch: int | None = None  # None: 5 for cnn3d, 3 for cnn32h
    train_fraction: float = 0.4
    normalize: bool = True


@dataclass
class AnnConfig:
    epochs: int = 100
    lr: float = 0.01
    decay: float = 0.1
    milestones: list = field(default_factory=lambda: [60, 80, 90])
    batch_size: int = 50
    momentum: float = 0.0
    weight_decay: float = 0.0


@dataclass
class SnnConfig:
    epochs: int = 100
    lr: float = 1e-4
    decay: float = 0.5
    milestones: list = field(default_factory=lambda: [60, 80, 90])
    batch_size: int = 50
    bits: int | None = 6
    timesteps: int = 5
    gamma: float = 0.3
    potential_bits: int | None = 6


@dataclass
class CalibrationSection:
    batch: int = 50
    T_cal: int = 100
    percentile: float = 99.7
    scale: float = 0.8


@dataclass
class EnergySection:
    ann_bits: int = 32
    snn_bits: int = 6
    mac_exponent: float = 1.25
    ac_exponent: float = 1.0
    anchors: str = "table"


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: str = "cnn3d"
    hidden: int = 128
    ann: AnnConfig = field(default_factory=AnnConfig)
    snn: SnnConfig = field(default_factory=SnnConfig)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    energy: EnergySection = field(default_factory=EnergySection)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if self.architecture not in ("cnn3d", "cnn32h"):
            raise ConfigurationError(f"architecture must be 'cnn3d' or 'cnn32h', got {self.architecture!r}")
        if self.energy.anchors not in ("table", "power_law"):
            raise ConfigurationError("energy.anchors must be 'table' or 'power_law'")
        if not 0 < self.dataset.train_fraction < 1:
            raise ConfigurationError("dataset.train_fraction must lie in (0, 1)")
        if self.snn.timesteps < 1 or self.calibration.T_cal < 1:
            raise ConfigurationError("timesteps must be >= 1")
        return self


def _check_type(value, tp, where):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            if arg is type(None) and value is None:
                return value
        for arg in typing.get_args(tp):
            if arg is not type(None):
                try:
                    return _check_type(value, arg, where)
                except ConfigurationError:
                    pass
        raise ConfigurationError(f"{where}: invalid value {value!r}")
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (bool, str) and isinstance(value, tp):
        return value
    if tp is list and isinstance(value, list):
        return value
    raise ConfigurationError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        path = f"{where}.{key}"
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, path)
        else:
            kwargs[key] = _check_type(value, tp, path)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config").validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data)
