"""Run configuration: an INI-style file with one section per component.

Sections and keys mirror the dataclass fields (see ``RunConfig.defaults_text()``):
``[model]`` ModelConfig, ``[train]`` TrainConfig (without ``sigma``),
``[noise]`` NoiseSpec, ``[jacobi]`` JacobiPlan, ``[data]`` SyntheticVideoSpec,
``[sample]`` and ``[stream]``. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticVideoSpec
from .denoiser import NoiseSpec
from .jacobi import JacobiPlan
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SampleConfig:
    count: int = 4
    label: int = 0
    guidance_weight: float = 1.0
    guidance_shallow: bool = False
    use_guidance: bool = False
    temperature: float = 1.0
    corrector: bool = True
    jacobi: bool = False


@dataclass(frozen=True)
class StreamConfig:
    frames: int = 24
    window: int = 8
    delta: int | None = None  # default window // 2
    reencode: bool = True
    pipelined: bool = False


# fields owned by another section
_EXCLUDED = {"train": {"sigma"}, "jacobi": {"seed"}}
_SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "noise": NoiseSpec,
    "jacobi": JacobiPlan,
    "data": SyntheticVideoSpec,
    "sample": SampleConfig,
    "stream": StreamConfig,
}


def _coerce(section: str, key: str, raw: str, hint):
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    optional = type(None) in typing.get_args(hint)
    if optional and text.lower() in ("none", ""):
        return None
    if origin is typing.Literal:
        if text not in typing.get_args(hint):
            raise ConfigError(f"[{section}] {key}: expected one of {typing.get_args(hint)}, got {text!r}")
        return text
    if args and origin is not None:
        hint = args[0]
        if typing.get_origin(hint) is typing.Literal:
            return _coerce(section, key, raw, hint)
    try:
        if hint is bool:
            low = text.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from err


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    jacobi: JacobiPlan = field(default_factory=JacobiPlan)
    data: SyntheticVideoSpec = field(default_factory=SyntheticVideoSpec)
    sample: SampleConfig = field(default_factory=SampleConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)

    def __post_init__(self):
        m, d = self.model, self.data
        if (m.n_frames, m.grid, m.channels) != (d.n_frames, d.grid, d.channels):
            raise ConfigError("[data] geometry must match [model] (n_frames, grid, channels)")
        if self.train.sigma != self.noise.sigma:
            object.__setattr__(self, "train", replace(self.train, sigma=self.noise.sigma))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as err:
            raise ConfigError(f"{source}: {err}") from err
        unknown = set(parser.sections()) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
        parts = {}
        for name, cls_ in _SECTIONS.items():
            hints = _hints(cls_)
            allowed = {f.name for f in fields(cls_)} - _EXCLUDED.get(name, set())
            values = {}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in allowed:
                        raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                    values[key] = _coerce(name, key, raw, hints[key])
            try:
                parts[name] = cls_(**values)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"{source}: [{name}] {err}") from err
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            obj = getattr(self, name)
            skip = _EXCLUDED.get(name, set())
            out[name] = {k: v for k, v in dataclasses.asdict(obj).items() if k not in skip}
        return out

    def to_text(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {'none' if v is None else v}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def defaults_text(cls) -> str:
        return cls().to_text()

    def with_seed(self, seed: int) -> RunConfig:
        """Apply a run seed to every seeded component."""
        return replace(
            self,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
        )
