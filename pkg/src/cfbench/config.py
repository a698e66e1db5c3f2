"""Pipeline configuration: one JSON file, defaults at the reference constants."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cfbench.discovery import TOP_FRACTION
from cfbench.graph import ANCD_MIN, CNDA_MIN, DEPTH_MIN
from cfbench.llm import DEFAULT_JSON_RETRIES, DEFAULT_MAX_IN_FLIGHT
from cfbench.qgen import CANDIDATES_PER_LEVEL
from cfbench.reward import ALPHA, BETA, K_SAMPLES


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    base_url: str = "https://api.deepseek.com/v1"
    models: dict[str, str] = field(default_factory=lambda: {"default": "deepseek-chat"})
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    json_retries: int = DEFAULT_JSON_RETRIES
    transport_retries: int = 3
    timeout_s: float = 120.0
    temperature: float = 0.0


@dataclass
class Thresholds:
    ancd: float = ANCD_MIN
    depth: int = DEPTH_MIN
    cnda: float = CNDA_MIN


@dataclass
class Paths:
    annotations: str | None = None
    output: str = "out"
    fixtures: str | None = None


@dataclass
class Flags:
    mock: bool = False
    strict_mock: bool = False
    difficulty_mode: bool = False
    adjacent_force_include: bool = True
    batched_observer: bool = True


@dataclass
class PipelineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    observer_fraction: float = TOP_FRACTION
    observer_window: int | None = None
    candidates_per_level: int = CANDIDATES_PER_LEVEL
    k_samples: int = K_SAMPLES
    alpha: float = ALPHA
    beta: float = BETA
    std_ddof: int = 0
    seed: int = 0
    workers: int = 1
    paths: Paths = field(default_factory=Paths)
    flags: Flags = field(default_factory=Flags)

    def validate(self) -> "PipelineConfig":
        t = self.thresholds
        if min(t.ancd, t.depth, t.cnda, self.alpha, self.beta) < 0:
            raise ConfigError("thresholds and reward weights must be non-negative")
        if not 0 < self.observer_fraction <= 1:
            raise ConfigError(f"observer_fraction must be in (0, 1], got {self.observer_fraction}")
        if self.observer_window is not None and self.observer_window < 1:
            raise ConfigError("observer_window must be >= 1")
        if self.candidates_per_level < 1:
            raise ConfigError("candidates_per_level must be >= 1")
        if self.k_samples < 2:
            raise ConfigError("k_samples must be >= 2")
        if self.std_ddof not in (0, 1):
            raise ConfigError("std_ddof must be 0 or 1")
        if self.workers < 1 or self.backend.max_in_flight < 1:
            raise ConfigError("workers and max_in_flight must be >= 1")
        if self.backend.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _merge(cls, current, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'config'}: {', '.join(unknown)}")
    updates = {}
    for key, value in data.items():
        sub = getattr(current, key)
        if dataclasses.is_dataclass(sub):
            updates[key] = _merge(type(sub), sub, value, f"{where}.{key}" if where else key)
        else:
            updates[key] = value
    return dataclasses.replace(current, **updates)


def config_from_dict(data: dict[str, Any], base_dir: str | Path | None = None) -> PipelineConfig:
    cfg = _merge(PipelineConfig, PipelineConfig(), data, "")
    if base_dir is not None:
        p = cfg.paths
        cfg.paths = Paths(
            annotations=_resolve(p.annotations, base_dir),
            output=_resolve(p.output, base_dir) if "output" in data.get("paths", {}) else p.output,
            fixtures=_resolve(p.fixtures, base_dir),
        )
    return cfg.validate()


def _resolve(path: str | None, base_dir) -> str | None:
    if path is None or Path(path).is_absolute():
        return path
    return str(Path(base_dir) / path)


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a config file; relative paths inside it resolve against the file's directory."""
    if path is None:
        return PipelineConfig().validate()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, Path(path).resolve().parent)
