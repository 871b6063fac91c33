"""Run configuration: four INI sections mapped onto dataclasses.

Every key is optional; unknown sections or keys are rejected with the line
they appear on. ``RunConfig.hash`` identifies a configuration in artifacts.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ARCHITECTURES, ConfigError, SivSpec
from .training import TrainConfig

PRESETS = ("main_table", "ablations", "carry_forward", "noise_sweep", "sign_flip")
GENERATORS = ("toy", "physio", "csv")


class ConfigFileError(ConfigError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class DataConfig:
    generator: str = "toy"
    individuals: int = 5
    seed: int = 0
    toy_length: int = 720
    physio_days: int = 10
    T: int = 24
    h: int = 6
    carry_forward: bool = True
    csv_dir: str = ""
    missing_fraction: float = 0.0
    noise_magnitude: float = 0.0
    corruption_seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.individuals < 1 or self.T < 1 or self.h < 1:
            raise ConfigError("individuals, T and h must be positive")


@dataclass
class ModelConfig:
    arch: str = "linked"
    hidden: int = 32
    num_layers: int = 2
    bidirectional: bool = True
    sivs: str = "carbs:+1,bolus:-1"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        self.siv_specs()

    def siv_specs(self) -> tuple[SivSpec, ...]:
        specs = []
        for channel, item in enumerate(s.strip() for s in self.sivs.split(",") if s.strip()):
            name, _, sign = item.partition(":")
            try:
                k = int(sign)
            except ValueError:
                raise ConfigError(f"SIV entry {item!r} must look like name:+1 or name:-1") from None
            specs.append(SivSpec(name.strip(), channel, k))
        if not specs:
            raise ConfigError("at least one SIV is required")
        return tuple(specs)


@dataclass
class ExperimentConfig:
    preset: str = "main_table"
    seeds: tuple[int, ...] = (0, 1, 2)
    archs: tuple[str, ...] = ()  # empty: the preset's own list
    corruption_seeds: int = 5
    missing_levels: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    noise_levels: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    bootstrap: int = 1000
    usage: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        for a in self.archs:
            if a not in ARCHITECTURES + ("siv_initialize", "siv_finetune"):
                raise ConfigError(f"unknown architecture {a!r}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(
            self, data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, seed=seed))

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
            "experiment": ExperimentConfig}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, annotation: str):
    raw = raw.strip()
    if "tuple" in annotation:
        inner = float if "float" in annotation else int if "int" in annotation else str
        return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
    if raw.lower() == "none" and "None" in annotation:
        return None
    if annotation.startswith("bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if annotation.startswith("int"):
        return int(raw)
    if annotation.startswith("float"):
        return float(raw)
    return raw


def _line_of(text: str, section: str | None, key: str | None = None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.I):
            return n
    return None


def loads(text: str, path: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigFileError(str(exc).splitlines()[0], getattr(exc, "lineno", None), path) from None
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]", _line_of(text, section), path)
        cls = SECTIONS[section]
        known = {f.name.lower(): f for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            f = known.get(key)
            if f is None:
                raise ConfigFileError(f"unknown key {key!r} in [{section}]",
                                      _line_of(text, section, key), path)
            try:
                values[f.name] = _parse(raw, str(f.type))
            except ValueError as exc:
                raise ConfigFileError(f"{section}.{key}: {exc}", _line_of(text, section, key),
                                      path) from None
        try:
            parts[section] = cls(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigFileError(f"[{section}] {exc}", _line_of(text, section), path) from None
    return RunConfig(**parts)


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(), str(path))
