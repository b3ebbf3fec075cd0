"""Run configuration: YAML file with model/train/data sections plus ``section.key=value`` overrides.

Precedence is command line over file over built-in default. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ModelConfig
from .training import PROFILES, TrainConfig


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 needs a dot in floats, so "1e-3" would load as a string; accept the 1.2 form too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _load_yaml(text):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    n_samples: int = 8
    n_val: int = 4
    n_points: int = 2048
    seed: int = 0
    categories: list[str] = field(default_factory=lambda: ["sphere", "prolate", "oblate"])
    radius: float = 1.0
    jitter: float = 0.15
    task: str = "pressure"
    recipe: str = "surface"
    direction: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "data": asdict(self.data)}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _known(section: str) -> set[str]:
    return {f.name for f in fields(SECTIONS[section])}


def parse_override(text: str) -> tuple[str, str, object]:
    """``"train.lr=1e-3"`` -> ("train", "lr", 0.001); values are parsed as YAML scalars/lists."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    section, name = key.strip().split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    if name not in _known(section):
        raise ConfigError(f"unknown key {section}.{name}")
    try:
        value = _load_yaml(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value for {key}: {e}") from e
    return section, name, value


def load_config(path=None, overrides=(), profile: str | None = None) -> RunConfig:
    """Merge defaults, an optional named train profile, the YAML file, then overrides."""
    layers: dict[str, dict] = {s: {} for s in SECTIONS}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        layers["train"].update(PROFILES[profile])
    if path is not None:
        try:
            doc = _load_yaml(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config file must be a mapping of sections")
        for section, values in doc.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            values = values or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            unknown = set(values) - _known(section)
            if unknown:
                raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
            layers[section].update(values)
    for text in overrides:
        section, name, value = parse_override(text)
        layers[section][name] = value
    try:
        return RunConfig(**{s: SECTIONS[s](**layers[s]) for s in SECTIONS})
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e
