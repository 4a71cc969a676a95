"""Run configuration: dataclass defaults, flat key=value files, CLI overrides.

Precedence is flag > config file > default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    P: int = 12
    Q: int = 12
    mode: str = "multi_step"
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    pseudo_split: float = 0.5
    horizons: tuple = (3, 6, 12)


@dataclass
class SearchConfig:
    M: int = 5
    B: int = 4
    D: int = 32
    partial_channel_fraction: float = 0.25
    tau_init: float = 5.0
    tau_factor: float = 0.9
    tau_floor: float = 0.001
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    theta_lr: float = 3e-4
    theta_betas: tuple = (0.5, 0.999)
    theta_weight_decay: float = 1e-3
    w_lr: float = 1e-3
    w_weight_decay: float = 1e-4
    grad_clip: float = 5.0
    residual: bool = True
    merge: str = "sum"
    loss: str = "mae"
    no_temperature: bool = False
    no_macro_search: bool = False
    forbid_zero_on_mandatory_edge: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.theta_lr <= 0 or self.w_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.merge != "sum":
            raise ConfigError(f"merge mode {self.merge!r} not supported (only 'sum')")
        if self.M < 2 or self.B < 1:
            raise ConfigError("need M >= 2 and B >= 1")


@dataclass
class TrainConfig:
    train_epochs: int = 100
    patience: int = 15
    train_batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    residual: bool = True
    loss: str = "mae"
    seed: int = 0

    def __post_init__(self):
        if self.train_epochs < 1 or self.patience < 1:
            raise ConfigError("train_epochs and patience must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


def _coerce(value: str, current, name: str):
    try:
        if isinstance(current, bool):
            low = value.strip().lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(v) for v in value.replace(" ", "").split(",") if v)
        return value.strip()
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {value!r}") from None


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build(cls, file_values: dict[str, str] | None = None, overrides: dict | None = None):
    """Instantiate ``cls`` from defaults, then file values, then non-None overrides."""
    values = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
              for f in fields(cls)}
    for key, raw in (file_values or {}).items():
        if key in values:
            values[key] = _coerce(raw, values[key], key)
    for key, val in (overrides or {}).items():
        if key in values and val is not None:
            values[key] = val
    return cls(**values)


def known_keys() -> set[str]:
    return {f.name for cls in (DataConfig, SearchConfig, TrainConfig) for f in fields(cls)}


def check_keys(file_values: dict[str, str]):
    unknown = sorted(set(file_values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def dump(*configs) -> str:
    lines = []
    for cfg in configs:
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
