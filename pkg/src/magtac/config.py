"""Simulation presets and the INI config file schema.

A config file has up to four sections, each holding ``key = value`` pairs
for the matching dataclass below; a ``[run]`` section may name the preset
the overrides apply to::

    [run]
    preset = desk

    [magnet]
    noise_sigma = 5e-7

    [dataset]
    grid_size = 10
    seed = 42

Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from magtac.elastomer import ElastomerConfig, RenderConfig
from magtac.magnetics import MagnetConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    grid_size: int = 10
    presses_per_location: int = 1
    duration_s: float = 2.0
    fps: float = 30.0
    window: int = 20
    min_peak: float = 0.2
    max_peak: float = 1.0
    indenter_radius: float = 3.0
    margin_mm: float = 3.0  # keep-out band between grid and surface edge
    camera_noise: float = 0.0  # per-pixel Gaussian std added after rendering
    seed: int = 42

    def __post_init__(self):
        if self.grid_size < 1 or self.presses_per_location < 1:
            raise ConfigError("grid_size and presses_per_location must be >= 1")
        if self.margin_mm < self.indenter_radius:
            raise ConfigError("grid margin must be at least the indenter radius")
        if not 0.0 < self.min_peak <= self.max_peak <= 1.0:
            raise ConfigError("peak force range must satisfy 0 < min <= max <= 1 N")

    @property
    def frames_per_press(self):
        return int(round(self.duration_s * self.fps))


@dataclass(frozen=True)
class SimConfig:
    magnet: MagnetConfig = field(default_factory=MagnetConfig)
    elastomer: ElastomerConfig = field(default_factory=ElastomerConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self):
        return {
            name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in SECTIONS
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, typ in SECTIONS.items():
            values = dict(data.get(name, {}))
            known = {f.name: f for f in dataclasses.fields(typ)}
            bad = set(values) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            if "tint" in values:
                values["tint"] = tuple(values["tint"])
            try:
                parts[name] = typ(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**parts)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


SECTIONS = {
    "magnet": MagnetConfig,
    "elastomer": ElastomerConfig,
    "render": RenderConfig,
    "dataset": DatasetConfig,
}


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def preset(name):
    """``desk``: 64 px images, 10x10 grid (4,000 samples). ``paper``: 224 px, 20x20 grid (16,000 samples)."""
    if name == "desk":
        return SimConfig(render=RenderConfig.for_size(64), dataset=DatasetConfig(grid_size=10))
    if name == "paper":
        return SimConfig(render=RenderConfig.for_size(224), dataset=DatasetConfig(grid_size=20))
    raise ConfigError(f"unknown preset {name!r} (choose 'desk' or 'paper')")


PRESETS = ("desk", "paper")


def _parse_value(raw, current):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def load_config(path, base="desk"):
    """Read an INI file on top of a preset (the file's ``[run] preset`` wins over ``base``)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    sections = set(parser.sections())
    unknown = sections - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "run" in sections:
        bad = set(parser["run"]) - {"preset"}
        if bad:
            raise ConfigError(f"unknown keys in [run]: {sorted(bad)}")
        base = parser["run"].get("preset", base)
    cfg = preset(base)
    data = cfg.to_dict()
    for name in SECTIONS:
        if name not in sections:
            continue
        current = dataclasses.asdict(getattr(cfg, name))
        for key, raw in parser[name].items():
            if key not in current:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                data[name][key] = _parse_value(raw, current[key])
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return SimConfig.from_dict(data)


def dump_config(cfg: SimConfig, path, preset_name=None):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if preset_name:
        parser["run"] = {"preset": preset_name}
    for name, values in cfg.to_dict().items():
        parser[name] = {
            k: ",".join(repr(x) for x in v) if isinstance(v, list) else repr(v) if isinstance(v, float) else str(v)
            for k, v in values.items()
        }
    with open(path, "w") as fh:
        parser.write(fh)
