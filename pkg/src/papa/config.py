"""Experiment configuration and its flat ``key=value`` file format.

Keys are the dataclass field names, dotted for nested sections::

    dataset=optdigits
    model=mlp[32,32]
    papa.variant=papa_all
    papa.freq=2
    aug.mixup=0,0.5,1.0
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import AugmentGrids
from .population import PapaConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    lr_min: float = 1e-4
    period: int = 0  # epochs, cosine_restarts only
    milestones: tuple = ()  # epochs, multistep only
    factor: float = 0.1


@dataclass
class SwaConfig:
    enabled: bool = False
    start_fraction: float = 0.75


@dataclass
class SoupConfig:
    repair: bool = True  # REPAIR the final average soup against the members
    k: int = 5
    greedy_eval: str = "holdout"  # or "train"
    greedy_rebuild: str = "each"  # each | final | none


@dataclass
class SyntheticConfig:
    n: int = 600
    classes: int = 4
    dim: int = 16
    spread: float = 1.0


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_path: str = ""
    test_path: str = ""
    test_fraction: float = 0.0  # carve a test split from data_path when test_path is empty
    split_seed: int = 0
    split_mode: str = "random"  # random | tail (last test_fraction of the file, unshuffled)
    model: str = "mlp[32,32]"
    batchnorm: bool = True
    n_epochs: int = 10
    batch_size: int = 64
    p: int = 5
    holdout_fraction: float = 0.02
    seed: int = 1
    same_init: bool = False
    workers: int = 1
    track_events: bool = True
    out: str = "runs/default"
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    papa: PapaConfig = field(default_factory=PapaConfig)
    aug: AugmentGrids = field(default_factory=AugmentGrids.none)
    swa: SwaConfig = field(default_factory=SwaConfig)
    soup: SoupConfig = field(default_factory=SoupConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in ("optdigits", "cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_epochs < 1:
            raise ConfigError("n_epochs must be >= 1")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must be in [0, 1)")
        if self.split_mode not in ("random", "tail"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.optim.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optim.kind!r}")
        if self.soup.greedy_eval not in ("holdout", "train"):
            raise ConfigError("soup.greedy_eval must be 'holdout' or 'train'")
        if not 0 < self.swa.start_fraction < 1:
            raise ConfigError("swa.start_fraction must be in (0, 1)")
        w = self.papa.window
        if w is not None and w[1] > self.n_epochs:
            raise ConfigError("papa.window end exceeds n_epochs")
        for name in ("mixup", "label_smooth", "cutmix", "erase"):
            if not getattr(self.aug, name):
                raise ConfigError(f"aug.{name} grid is empty")
        return self


_SECTIONS = {"optim", "schedule", "papa", "aug", "swa", "soup", "synthetic"}


def _parse_value(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple) or current is None:
            if raw.lower() == "none":
                return None
            if raw == "":
                return ()
            return tuple(_number(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _number(s):
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        return float(s)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply ``(key, raw_value)`` pairs; unknown keys raise ConfigError."""
    top = {}
    nested: dict = {}
    for key, raw in items:
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] in _SECTIONS or not any(f.name == parts[0] for f in dataclasses.fields(cfg)):
                raise ConfigError(f"unknown config key {key!r}")
            top[parts[0]] = _parse_value(raw, getattr(cfg, parts[0]), key)
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section = getattr(cfg, parts[0])
            names = {f.name for f in dataclasses.fields(section)}
            if parts[1] not in names:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(parts[0], {})[parts[1]] = _parse_value(raw, getattr(section, parts[1]), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
        return dataclasses.replace(cfg, **top).validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        items.append((key.strip(), raw))
    return apply_overrides(base or ExperimentConfig(), items)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_items(cfg: ExperimentConfig) -> list:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for g in dataclasses.fields(v):
                out.append((f"{f.name}.{g.name}", _format_value(getattr(v, g.name))))
        else:
            out.append((f.name, _format_value(v)))
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config_items(cfg))


def config_digest(cfg: ExperimentConfig) -> str:
    text = "".join(f"{k}={v}\n" for k, v in config_items(cfg) if k not in ("out", "workers"))
    return hashlib.sha256(text.encode()).hexdigest()
