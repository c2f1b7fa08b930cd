"""Experiment configuration as flat ``section.key = value`` text.

Every field has a default, so an empty file is a valid config. Lines look
like::

    # comment
    seed = 3
    decision.gamma = 0.95
    perception.train.epochs = 8
    env.obstacle_size = (2.0, 3.0)

Values are Python literals (numbers, tuples, ``True``/``False``, ``None``);
bare words are taken as strings. Unknown keys and values that fail a
config's own validation raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..decision import AgentConfig
from ..perception import PerceptionConfig, TrackerConfig
from ..planner.gnn import PlannerConfig
from ..sim import EnvConfig

MODULES = ("perception", "decision", "planner", "all")


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


@dataclass(frozen=True)
class EvalConfig:
    detection_scenes: int = 2000
    tracking_sequences: int = 50
    sequence_frames: int = 20
    decision_episodes: int = 200
    planner_graphs: int = 100
    plan_bound: float = 1.05      # a plan counts as accurate within this factor of the optimum

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class BenchConfig:
    iterations: int = 200
    warmup: int = 20
    grid_side: int = 20

    def __post_init__(self):
        if self.iterations < 100:
            raise ValueError("iterations must be at least 100")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    module: str = "all"
    seed: int = 1
    out: str = "out"
    env: EnvConfig = EnvConfig()
    decision: AgentConfig = AgentConfig()
    perception: PerceptionConfig = PerceptionConfig()
    tracker: TrackerConfig = TrackerConfig()
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalConfig = EvalConfig()
    bench: BenchConfig = BenchConfig()

    def __post_init__(self):
        if self.module not in MODULES:
            raise ConfigError("module", f"must be one of {', '.join(MODULES)}, got {self.module!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be an integer in [0, 2^64), got {self.seed!r}")


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        if low in ("none", "null"):
            return None
        return text


def _coerce(key: str, value, current):
    """Fit ``value`` to the type of the field's current value."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(key, f"expected a tuple, got {value!r}")
        if current and all(isinstance(v, float) for v in current):
            return tuple(float(v) for v in value)
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value   # None-defaulted fields take any literal


def _is_section(value) -> bool:
    return dataclasses.is_dataclass(value) and not isinstance(value, type)


def _apply(obj, path: list[str], value, full_key: str):
    name = path[0]
    if not _is_section(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(full_key, "unknown key")
    current = getattr(obj, name)
    if len(path) == 1:
        if _is_section(current):
            raise ConfigError(full_key, "is a section, not a value")
        new = _coerce(full_key, value, current)
    else:
        new = _apply(current, path[1:], value, full_key)
    try:
        return dataclasses.replace(obj, **{name: new})
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(full_key, str(exc)) from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if base is None else base
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(key, f"set twice (line {lineno})")
        seen.add(key)
        cfg = _apply(cfg, key.split("."), _parse_value(value), key)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply top-level overrides (``seed``, ``out``, ``module``), skipping ``None`` values."""
    for key, value in overrides.items():
        if value is not None:
            cfg = _apply(cfg, [key], value, key)
    return cfg


def format_config(cfg, prefix: str = "") -> str:
    """Every field as one ``key = value`` line; ``parse_config`` reads it back unchanged."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if _is_section(value):
            lines.append(format_config(value, f"{prefix}{f.name}.").rstrip("\n"))
        else:
            lines.append(f"{prefix}{f.name} = {value!r}")
    return "\n".join(lines) + "\n"
