"""Run configuration tree, loaded from / dumped to YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .blocks import MODEL_VARIANTS, UNetSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    count: int = 64
    size: int = 32
    noise_levels: list[float] = field(default_factory=lambda: [25 / 255])
    train_fraction: float = 0.9
    seed: int = 0
    # separately generated evaluation images; 0 disables
    test_count: int = 16
    test_seed: int = 1


@dataclass
class SearchConfig:
    variant: str = "joint"
    mode: str = "full"
    tau: float = 1.0
    hard: bool = False
    key_dim: int = 8
    distill_logit_threshold: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: UNetSpec = field(default_factory=UNetSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, max_steps=1500))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=5e-4, max_steps=1000))

    def validate(self) -> None:
        self.model.validate()
        s = self.search
        if s.variant not in MODEL_VARIANTS:
            raise ConfigError(f"search.variant must be one of {MODEL_VARIANTS}, got {s.variant!r}")
        if s.mode not in ("full", "separate"):
            raise ConfigError(f"search.mode must be 'full' or 'separate', got {s.mode!r}")
        if s.mode == "separate" and s.variant in ("filterwise", "filterwise-attention"):
            raise ConfigError("separate mode is unsupported for filterwise variants")
        if not s.tau > 0:
            raise ConfigError(f"search.tau must be positive, got {s.tau}")
        if s.key_dim < 1:
            raise ConfigError("search.key_dim must be >= 1")
        d = self.data
        if d.count < 1 or d.size < 1 or d.size % (2 ** self.model.depth):
            raise ConfigError(f"data.size {d.size} must be a positive multiple of 2^depth")
        if not d.noise_levels or any(x < 0 for x in d.noise_levels):
            raise ConfigError("data.noise_levels must be non-empty and non-negative")
        if not 0 < d.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        for name in ("train", "finetune"):
            try:
                getattr(self, name).validate(self.model.depth)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc

    def sk_options(self) -> dict:
        s = self.search
        return {"tau": s.tau, "mode": s.mode, "hard": s.hard, "key_dim": s.key_dim,
                "threshold": s.distill_logit_threshold}


# ---------------------------------------------------------------------------
# (de)serialisation
# ---------------------------------------------------------------------------

def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(f"{where}: expected one of {args}, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = args[0] if args else object
        items = [_convert(elem, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an int, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a bool, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    return loads_config(text)


def loads_config(text: str) -> RunConfig:
    raw = yaml.safe_load(text) or {}
    cfg = from_dict(RunConfig, raw)
    cfg.validate()
    return cfg


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
