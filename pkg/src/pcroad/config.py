"""Flat ``section.key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
values that fail a sub-config's own validation raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .clustering import ClusterConfig
from .ground import GroundConfig
from .networks import EnergyConfig
from .projection import ProjectionConfig
from .proposals import ProposalConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineSettings:
    seed: int = 0
    classifier_weights: str = ""
    box_weights: str = ""
    min_box_size: float = 0.1
    # SemanticKITTI label ids scored as ground by eval-ground.
    ground_labels: str = "40,44,48,49,72"

    @property
    def ground_label_ids(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.ground_labels.split(",") if v.strip())


@dataclass(frozen=True)
class PipelineConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    ground: GroundConfig = field(default_factory=GroundConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:16]


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(PipelineConfig)}


def _field_types(cls) -> dict[str, type]:
    return typing.get_type_hints(cls)


def _format(value, tp) -> str:
    if tp is float:
        return repr(float(value))
    if tp is int:
        return str(int(value))
    if tp is str:
        return str(value)
    if typing.get_origin(tp) is tuple:
        return ",".join(repr(float(v)) for v in value)
    raise TypeError(f"unsupported config type {tp}")


def _coerce(text: str, tp):
    text = text.strip()
    if tp is float:
        return float(text)
    if tp is int:
        return int(text)
    if tp is str:
        return text
    if typing.get_origin(tp) is tuple:
        vals = tuple(float(v) for v in text.split(","))
        if len(vals) != len(typing.get_args(tp)):
            raise ValueError(f"expected {len(typing.get_args(tp))} comma-separated values")
        return vals
    raise TypeError(f"unsupported config type {tp}")


def _raw_pairs(text: str) -> dict[str, tuple[int, str]]:
    pairs: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if name not in _field_types(type(SECTIONS[section]())):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = (lineno, value)
    return pairs


def parse_config(text: str) -> PipelineConfig:
    pairs = _raw_pairs(text)
    sections = {}
    for section, factory in SECTIONS.items():
        cls = type(factory())
        kwargs = {}
        for name, tp in _field_types(cls).items():
            key = f"{section}.{name}"
            if key in pairs:
                lineno, raw = pairs[key]
                try:
                    kwargs[name] = _coerce(raw, tp)
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        try:
            sections[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from None
    return PipelineConfig(**sections)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for name, tp in _field_types(type(sub)).items():
            lines.append(f"{section}.{name} = {_format(getattr(sub, name), tp)}")
    return "\n".join(lines) + "\n"


def normalize_config_text(text: str) -> str:
    """Canonical form of a config file: defaults filled in, comments dropped,
    keys in schema order, numbers in canonical notation."""
    pairs = _raw_pairs(text)
    lines = []
    for section, factory in SECTIONS.items():
        sub = factory()
        for name, tp in _field_types(type(sub)).items():
            key = f"{section}.{name}"
            value = _coerce(pairs[key][1], tp) if key in pairs else getattr(sub, name)
            lines.append(f"{key} = {_format(value, tp)}")
    return "\n".join(lines) + "\n"


def load_config(path, check_files: bool = True) -> PipelineConfig:
    """Read a config file; relative weight paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    p = cfg.pipeline
    resolved = {}
    for name in ("classifier_weights", "box_weights"):
        value = getattr(p, name)
        if value:
            full = Path(value) if Path(value).is_absolute() else path.parent / value
            if check_files and not full.is_file():
                raise ConfigError(f"{name}: file not found: {full}")
            resolved[name] = str(full)
    return cfg.replace(pipeline=dataclasses.replace(p, **resolved))


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(serialize_config(cfg))
