"""INI configuration: ``[synthetic]``, ``[model]``, ``[loss]``, ``[train]``, ``[retrieval]``.

Every section is optional and missing keys keep their defaults. Unknown
sections or keys raise :class:`ConfigError`, so typos do not pass silently.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SyntheticSpec
from .dsd import CONV_COLLAPSE, KERNEL_MODES
from .errors import ConfigError
from .objective import LossConfig
from .retrieval import RetrievalConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 0  # 0 means "same as the input dimension"
    kernel_mode: str = CONV_COLLAPSE
    kernel_learnable: bool = True
    force_projection: bool = False
    l2_normalize: bool = True

    def __post_init__(self):
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")


@dataclass(frozen=True)
class Config:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(Config)}


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build(section: str, items: dict[str, str], source: str):
    cls = _SECTIONS[section]
    default = cls()
    kinds = {f.name: type(getattr(default, f.name)) for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in kinds:
            raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
        values[key] = _convert(raw, kinds[key], f"{source} [{section}] {key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source} [{section}]: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        sections[name] = _build(name, dict(parser.items(name)), source)
    return Config(**sections)


def load_config(path) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        lines.append(f"[{f.name}]")
        for sub in dataclasses.fields(getattr(cfg, f.name)):
            v = getattr(getattr(cfg, f.name), sub.name)
            lines.append(f"{sub.name} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
