"""Run configuration: a nested schema with strict JSON loading.

Configs are plain dataclasses so defaults live in one place.  Loading
rejects unknown keys and type mismatches with the full dotted path, so
a typo in a config file or a --set override fails loudly instead of
silently training with defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending dotted path."""


@dataclass
class DataSection:
    n_scenes: int = 4000
    questions_per_scene: int = 5
    condition: str = "unrestricted"
    train_frac: float = 0.8
    val_frac: float = 0.1
    answer_cap: float = 0.6
    short_long_threshold: float = 10.0


@dataclass
class ModelSection:
    d_embed: int = 64
    d_hidden: int = 128
    n_layers: int = 2
    max_len: int = 30
    cells: int = 8
    channels: int = 16
    classifier_hidden: int = 128


@dataclass
class PGSection:
    lr: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 8


@dataclass
class EESection:
    lr: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 25
    patience: int = 5
    weight_decay: float = 0.0
    augment: bool = True


@dataclass
class JointSection:
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-4
    ee_lr: float = 1e-4
    baseline_decay: float = 0.99
    freeze_ee: bool = True
    clip_norm: float = 0.0  # 0 disables clipping


@dataclass
class ScheduleSection:
    n_supervised: int = 100
    pg: PGSection = field(default_factory=PGSection)
    ee: EESection = field(default_factory=EESection)
    joint: JointSection = field(default_factory=JointSection)


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    threads: int = 1
    out_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


def default_config() -> RunConfig:
    return RunConfig()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(value, target_type, path: str):
    # bool precedes int in the numeric tower, so test it first
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {target_type!r}")


def _from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {payload!r}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for name, f in fields.items():
        if name not in payload:
            continue
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type[0].isupper()
        ):
            kwargs[name] = _from_dict(_resolve_type(f), payload[name], sub)
        else:
            kwargs[name] = _coerce(payload[name], _resolve_type(f), sub)
    return cls(**kwargs)


_TYPES = {
    "int": int,
    "float": float,
    "bool": bool,
    "str": str,
}


def _resolve_type(f: dataclasses.Field):
    # `from __future__ import annotations` stringifies field types
    if isinstance(f.type, str):
        if f.type in _TYPES:
            return _TYPES[f.type]
        return globals()[f.type]
    return f.type


def config_from_dict(payload: dict) -> RunConfig:
    return _from_dict(RunConfig, payload, "")


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(payload)


def apply_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply one `dotted.path=value` override, returning a new config."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    payload = config_to_dict(cfg)
    node = payload
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"{dotted!r} is a section, not a value")
    node[leaf] = raw.strip()
    return config_from_dict(payload)


def config_hash(cfg: RunConfig) -> str:
    """Stable 12-hex digest of the resolved config."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
