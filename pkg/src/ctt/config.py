"""Training configuration and its text file format.

The config file is INI-style: top-level ``TrainConfig`` fields live in a
``[train]`` section and the nested configs in ``[backbone]``, ``[weights]``
and ``[contrast]``. Overrides use dotted keys (``weights.ct=0``); top-level
keys need no prefix (``max_iters=10``). Precedence: override > file > default.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError
from .losses import ContrastConfig, LossWeights
from .model import BackboneConfig

TOPOLOGIES = (
    "cross_teacher",
    "mean_teacher",
    "mutual",
    "dual_teacher",
    "self_training",
    "supervised_only",
    "ensemble",
)
EVAL_NETWORKS = ("studentA", "teacherA", "ensemble")
NESTED = {"backbone": BackboneConfig, "weights": LossWeights, "contrast": ContrastConfig}


@dataclass(frozen=True)
class TrainConfig:
    pairs: int = 2
    topology: str = "cross_teacher"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    bank_capacity: int = 64
    ema_decay: float = 0.99
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_power: float = 0.9
    max_iters: int = 4000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    crop: int = 64
    seed: int = 0
    data_dir: str = ""
    val_dir: str = ""
    labeled_fraction: str = "1/20"
    split_seed: int = 0
    eval_interval: int = 0  # 0: evaluate only after the last step
    checkpoint_interval: int = 0  # 0: initial and final checkpoints only
    log_interval: int = 1
    eval_network: str = "studentA"
    eval_batch: int = 16

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology: must be one of {', '.join(TOPOLOGIES)}")
        if self.pairs < 1:
            raise ConfigError(f"pairs: must be >= 1, got {self.pairs}")
        if self.topology in ("cross_teacher", "mutual", "dual_teacher", "ensemble") and self.pairs < 2:
            raise ConfigError(f"pairs: topology {self.topology} needs pairs >= 2")
        if self.eval_network not in EVAL_NETWORKS:
            raise ConfigError(f"eval_network: must be one of {', '.join(EVAL_NETWORKS)}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay: must be in [0, 1], got {self.ema_decay}")
        if self.bank_capacity < 1:
            raise ConfigError(f"bank_capacity: must be >= 1, got {self.bank_capacity}")
        for name in ("max_iters", "eval_interval", "checkpoint_interval", "batch_unlabeled"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        for name in ("batch_labeled", "log_interval", "eval_batch", "crop"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.crop % self.backbone.stride:
            raise ConfigError(f"crop: {self.crop} not divisible by stride {self.backbone.stride}")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_power < 0:
            raise ConfigError("base_lr, momentum, weight_decay, lr_power: must be >= 0")
        try:
            frac = Fraction(self.labeled_fraction)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"labeled_fraction: cannot parse {self.labeled_fraction!r}") from exc
        if not 0 < frac <= 1:
            raise ConfigError(f"labeled_fraction: must be in (0, 1], got {self.labeled_fraction}")


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale hyperparameters: long schedule, larger banks, small learning rate."""
    base = dict(
        base_lr=2.5e-4,
        momentum=0.9,
        lr_power=0.9,
        ema_decay=0.99,
        bank_capacity=128,
        max_iters=80000,
        contrast=ContrastConfig(temperature=0.5, threshold=0.75),
        weights=LossWeights(1.0, 1.0, 0.1, 0.1),
    )
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# text format


def _hints(cls):
    return typing.get_type_hints(cls)


def valid_keys() -> list[str]:
    keys = []
    for name in _hints(TrainConfig):
        if name in NESTED:
            keys.extend(f"{name}.{sub}" for sub in _hints(NESTED[name]))
        else:
            keys.append(name)
    return keys


def _coerce(tp, text: str, key: str):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            (inner, *_) = typing.get_args(tp)
            return tuple(inner(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def apply_overrides(config: TrainConfig, overrides: typing.Mapping[str, str]) -> TrainConfig:
    """Return ``config`` with string-valued ``overrides`` (dotted keys) applied."""
    known = set(valid_keys())
    top, nested = {}, {name: {} for name in NESTED}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(known))}")
        if "." in key:
            section, sub = key.split(".", 1)
            nested[section][sub] = _coerce(_hints(NESTED[section])[sub], value, key)
        else:
            top[key] = _coerce(_hints(TrainConfig)[key], value, key)
    for section, values in nested.items():
        if values:
            top[section] = dataclasses.replace(getattr(config, section), **values)
    try:
        return dataclasses.replace(config, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> dict[str, str]:
    """Flatten a config file into dotted ``key -> raw string`` pairs."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key if section == "train" else f"{section}.{key}"] = value
    return flat


def load_config(path=None, overrides=None) -> TrainConfig:
    config = TrainConfig()
    if path is not None:
        with open(path) as fh:
            config = apply_overrides(config, parse_config(fh.read()))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def format_config(config: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["train"] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in NESTED:
            parser[f.name] = {
                sub.name: _format(getattr(value, sub.name)) for sub in dataclasses.fields(value)
            }
        else:
            parser["train"][f.name] = _format(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    for name, cls in NESTED.items():
        if name in d:
            sub = dict(d[name])
            if name == "backbone":
                sub["widths"] = tuple(sub["widths"])
            d[name] = cls(**sub)
    return TrainConfig(**d)
