"""Typed run configuration loaded from JSON.

Every field has a default matching the shipped recipe; unknown keys and
type mismatches are rejected with the full field path (there is no silent
coercion, including bool-vs-int).  The resolved configuration — defaults
expanded — is written beside every command's outputs so runs are
reproducible from their artifacts alone.
"""
from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .geometry import ConversionMode
from .inference import InferenceConfig, RefineConfig
from .losses import FocalParams, LossWeights, RegressionMode
from .model import HeadConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "resolve_config", "config_to_json"]


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending field path."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    strides: tuple[int, ...] = (4, 8)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self) -> None:
        if self.head.num_classes != self.dataset.num_classes:
            raise ConfigError(
                "head.num_classes: must equal dataset.num_classes "
                f"({self.head.num_classes} != {self.dataset.num_classes})"
            )


_ENUM_FIELDS = {
    ("head", "conversion"): ConversionMode,
    ("head", "regression_mode"): RegressionMode,
    ("inference", "conversion"): ConversionMode,
}


def _check_type(path: str, value, expected: type):
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {type(value).__name__}")
        return value
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {type(value).__name__}")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported field type {expected}")


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key")
        f = fields[key]
        sub_path = f"{path}.{key}"
        if dataclasses.is_dataclass(f.type) or f.name in (
            "dataset", "head", "train", "inference", "refine", "loss_weights", "focal",
        ):
            kwargs[key] = _build_dataclass(_nested_type(cls, f.name), value, sub_path)
        elif _enum_for(path, key) is not None:
            enum_cls = _enum_for(path, key)
            if not isinstance(value, str):
                raise ConfigError(f"{sub_path}: expected string, got {type(value).__name__}")
            try:
                kwargs[key] = enum_cls(value)
            except ValueError:
                options = sorted(m.value for m in enum_cls)
                raise ConfigError(f"{sub_path}: expected one of {options}") from None
        elif f.name == "strides":
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ConfigError(f"{sub_path}: expected a list of integers")
            kwargs[key] = tuple(value)
        else:
            base = _scalar_type(cls, f.name)
            kwargs[key] = _check_type(sub_path, value, base)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_NESTED = {
    (RunConfig, "dataset"): DatasetSpec,
    (RunConfig, "head"): HeadConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "inference"): InferenceConfig,
    (InferenceConfig, "refine"): RefineConfig,
    (HeadConfig, "loss_weights"): LossWeights,
    (HeadConfig, "focal"): FocalParams,
}

_SCALARS = {
    bool: bool,
    int: int,
    float: float,
    str: str,
}


def _nested_type(cls, name: str):
    try:
        return _NESTED[(cls, name)]
    except KeyError:
        raise ConfigError(f"internal: no nested type for {cls.__name__}.{name}") from None


def _scalar_type(cls, name: str):
    for f in dataclasses.fields(cls):
        if f.name == name:
            default = f.default if f.default is not dataclasses.MISSING else None
            if default is None and f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()  # type: ignore[misc]
            if isinstance(default, bool):
                return bool
            if isinstance(default, int):
                return int
            if isinstance(default, float):
                return float
            if isinstance(default, str):
                return str
    raise ConfigError(f"internal: no scalar type for {cls.__name__}.{name}")


def _enum_for(path: str, key: str):
    leaf = path.split(".")[-1]
    return _ENUM_FIELDS.get((leaf, key))


def resolve_config(data: dict | None) -> RunConfig:
    """Build a :class:`RunConfig` from a possibly-partial JSON-style dict."""
    return _build_dataclass(RunConfig, data or {}, "config")


def load_config(path) -> RunConfig:
    """Load and validate a JSON config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    return resolve_config(data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_json(cfg: RunConfig) -> str:
    """Fully resolved config as deterministic JSON."""
    return json.dumps(_to_plain(cfg), sort_keys=True, indent=2) + "\n"
