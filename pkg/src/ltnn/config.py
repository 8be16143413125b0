"""Run configuration: dataclasses plus flat key=value files.

Precedence is CLI override > config file > defaults. A key that does not
exist on the target dataclass is an error, not a warning.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    image_channels: int = 3
    n_conditions: int = 9
    conditioning: str = "ctu"  # "ctu" or "ch-concat"
    use_task_division: bool = True
    use_cdu: bool = True
    dtype: str = "float64"

    def validate(self):
        if self.image_size % 8 != 0 or self.image_size < 24:
            raise ConfigError(f"image_size must be a multiple of 8 and >= 24, got {self.image_size}")
        if self.conditioning not in ("ctu", "ch-concat"):
            raise ConfigError(f"conditioning must be 'ctu' or 'ch-concat', got {self.conditioning!r}")
        if self.n_conditions < 1:
            raise ConfigError(f"n_conditions must be >= 1, got {self.n_conditions}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        return self


@dataclass
class DatasetConfig:
    n_objects: int = 100
    image_size: int = 64
    n_conditions: int = 9
    family: str = "rotation"  # "rotation" or "illumination"
    palette: str = "d94f4f,3ab54a,3c6fd9,e0b92e,9a4fd1,e07b2e,2ebfbf,d94f8f"
    split_fraction: float = 0.8
    seed: int = 0

    def validate(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.family not in ("rotation", "illumination"):
            raise ConfigError(f"family must be 'rotation' or 'illumination', got {self.family!r}")
        if self.n_objects < 2:
            raise ConfigError(f"n_objects must be >= 2, got {self.n_objects}")
        if self.n_conditions < 1:
            raise ConfigError(f"n_conditions must be >= 1, got {self.n_conditions}")
        return self


@dataclass
class TrainConfig:
    epochs: int = 100
    max_steps: int = 0  # 0 = no cap; otherwise stop after this many steps
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    w_adv: float = 1.0
    w_recon: float = 10.0
    w_smooth: float = 0.05
    w_consist: float = 0.05
    grad_clip: float = 0.0  # 0 = off
    seed: int = 0
    checkpoint_interval: int = 500
    conditioning: str = "ctu"
    use_task_division: bool = True
    use_cdu: bool = True
    dtype: str = "float64"
    debug_checks: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.conditioning not in ("ctu", "ch-concat"):
            raise ConfigError(f"conditioning must be 'ctu' or 'ch-concat', got {self.conditioning!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        return self


def _coerce(name, value, target_type):
    try:
        if target_type is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {value!r} as {target_type.__name__}") from None


def parse_kv_text(text):
    """Parse flat `key=value` lines; '#' starts a comment, blank lines skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(cls, file_path=None, overrides=None):
    """Construct a config dataclass from defaults, an optional file and overrides."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    types = {name: type(getattr(cls(), name)) for name in fields}
    merged = {}
    if file_path is not None:
        with open(file_path, "r", encoding="utf-8") as fh:
            merged.update(parse_kv_text(fh.read()))
    if overrides:
        merged.update(overrides)
    kwargs = {}
    for key, value in merged.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(key, value, types[key]) if isinstance(value, str) else value
    cfg = cls(**kwargs)
    return cfg.validate()


def config_text(cfg):
    """Render a config dataclass back to flat key=value text."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def model_config_from_train(train_cfg, image_size, n_conditions, image_channels=3):
    return ModelConfig(
        image_size=image_size,
        image_channels=image_channels,
        n_conditions=n_conditions,
        conditioning=train_cfg.conditioning,
        use_task_division=train_cfg.use_task_division,
        use_cdu=train_cfg.use_cdu,
        dtype=train_cfg.dtype,
    ).validate()
