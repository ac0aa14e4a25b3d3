"""Run-config files: YAML key/value with every trainer and scenario field addressable."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .env import ScenarioConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    name: str
    map_paths: list[str]
    trainer: TrainerConfig
    scenario: ScenarioConfig


def _build(cls, data: dict, where: str):
    known = {f.name: f.type for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigError(f"bad {where} config: {err}") from err


def parse_run_config(text: str, base_dir: Path | None = None) -> RunSpec:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("run config must be a mapping")
    name = data.pop("name", "run")
    map_paths = data.pop("maps", None)
    if not map_paths or not isinstance(map_paths, list):
        raise ConfigError("run config needs a nonempty 'maps' list")
    if base_dir is not None:
        map_paths = [str((base_dir / p)) if not Path(p).is_absolute() else p for p in map_paths]
    scenario = _build(ScenarioConfig, data.pop("scenario", {}) or {}, "scenario")
    trainer = _build(TrainerConfig, data, "trainer")
    try:
        trainer.validate()
        scenario.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return RunSpec(name=name, map_paths=[str(p) for p in map_paths], trainer=trainer, scenario=scenario)


def load_run_config(path) -> RunSpec:
    p = Path(path)
    return parse_run_config(p.read_text(encoding="utf-8"), base_dir=p.parent)
