"""Run configuration: TOML with fixed sections; unknown keys are rejected."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import tomli

from .ansatz import TransformerConfig
from .lattice import Lattice, build_lattice
from .neural_operator import FNOConfig
from .protocols import FourierProtocolSpec, TimeGrid
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeConfig:
    Lx: int = 2
    Ly: int = 2
    ordering: str = "raster"

    def build(self) -> Lattice:
        return build_lattice(self.Lx, self.Ly, self.ordering)


@dataclass(frozen=True)
class GridConfig:
    T_max: float = 1.0
    N_t: int = 100

    def build(self) -> TimeGrid:
        return TimeGrid(self.T_max, self.N_t)


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4096
    seed: int = 1234


@dataclass(frozen=True)
class RunConfig:
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    protocol: FourierProtocolSpec = field(default_factory=FourierProtocolSpec)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    fno: FNOConfig = field(default_factory=FNOConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed),
                       protocol=replace(self.protocol, seed=seed),
                       evaluation=replace(self.evaluation, seed=seed))


def _build_section(cls, data: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    sections = {f.name: f.default_factory for f in fields(RunConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, factory in sections.items():
        cls = type(factory())
        kwargs[name] = _build_section(cls, dict(data.get(name, {})), name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)
