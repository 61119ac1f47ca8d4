"""Experiment configuration.

Files hold flat ``section.key = value`` lines; ``#`` starts a comment and
blank lines are ignored. Every key has a default, so an empty file yields
the reference preset (25 students, 5 teachers, dimension 1000).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from softmoe.errors import ConfigError


@dataclass
class ModelSection:
    m: int = 25
    m_star: int = 5
    d: int = 1000


@dataclass
class TeacherSection:
    mode: str = "canonical"


@dataclass
class TrainSection:
    eta: float = 0.05
    t_max_coeff: float = 3.0
    batch: int = 4096
    record_count: int = 200
    gradient: str = "mc"
    use_norms_pairing: bool = True


@dataclass
class PruneSection:
    estimator: str = "mc"
    batch: int = 65536
    margin: float | None = None


@dataclass
class FinetuneSection:
    steps: int = 2000
    eta: float = 0.05
    gradient: str = "analytic"
    batch: int = 4096
    record_every: int = 10
    max_row_distance: float = 0.5


@dataclass
class OracleSection:
    truncation_K: int = 40


@dataclass
class ThresholdsSection:
    xi: float = 0.9
    near_perfect: float = 0.98
    unmatched_bound: float = 0.25
    delta_s: float = 1e-3


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    thresholds: ThresholdsSection = field(default_factory=ThresholdsSection)


CHOICES = {
    "teacher.mode": ("canonical", "random_orthogonal"),
    "train.gradient": ("mc", "analytic"),
    "prune.estimator": ("mc", "analytic"),
    "finetune.gradient": ("mc", "analytic"),
}


def config_keys() -> dict[str, tuple[type, Any]]:
    """Map every dotted key to ``(type, default)``."""
    cfg = ExperimentConfig()
    keys: dict[str, tuple[type, Any]] = {"seed": (int, cfg.seed)}
    for sec in dataclasses.fields(cfg):
        if sec.name == "seed":
            continue
        obj = getattr(cfg, sec.name)
        hints = {f.name: f.type for f in dataclasses.fields(obj)}
        for f in dataclasses.fields(obj):
            keys[f"{sec.name}.{f.name}"] = (_base_type(hints[f.name]), getattr(obj, f.name))
    return keys


def _base_type(hint) -> type:
    text = hint if isinstance(hint, str) else getattr(hint, "__name__", str(hint))
    for name, typ in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if text.startswith(name):
            return typ
    raise TypeError(f"unsupported config type {hint!r}")


def _convert(key: str, raw: str, typ: type, line: int | None):
    raw = raw.strip()
    if raw.lower() in ("none", "auto") and key == "prune.margin":
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}", line) from None


def set_value(cfg: ExperimentConfig, key: str, raw: str, line: int | None = None) -> None:
    keys = config_keys()
    if key not in keys:
        raise ConfigError(f"unknown key {key!r}", line)
    value = _convert(key, raw, keys[key][0], line)
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}", line)
    if key == "seed":
        cfg.seed = value
    else:
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, value)


def validate(cfg: ExperimentConfig, lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Check cross-field invariants; errors cite the line of the key involved."""
    lines = lines or {}

    def fail(msg, key):
        raise ConfigError(msg, lines.get(key))

    positive = [
        "model.m", "model.m_star", "model.d", "train.eta", "train.t_max_coeff", "train.batch",
        "train.record_count", "prune.batch", "finetune.eta", "finetune.batch", "finetune.record_every",
        "finetune.max_row_distance", "thresholds.xi", "thresholds.near_perfect", "thresholds.unmatched_bound",
    ]
    for key in positive:
        if get_value(cfg, key) <= 0:
            fail(f"{key} must be positive", key)
    if cfg.seed < 0:
        fail("seed must be nonnegative", "seed")
    if cfg.finetune.steps < 0:
        fail("finetune.steps must be nonnegative", "finetune.steps")
    if cfg.thresholds.delta_s < 0:
        fail("thresholds.delta_s must be nonnegative", "thresholds.delta_s")
    if not cfg.thresholds.xi < 1 or not cfg.thresholds.near_perfect < 1:
        fail("recovery thresholds must be below 1", "thresholds.xi")
    if cfg.oracle.truncation_K < 8:
        fail("oracle.truncation_K must be at least 8", "oracle.truncation_K")
    if 2 * cfg.model.m_star > cfg.model.d:
        fail(f"2*m_star = {2 * cfg.model.m_star} exceeds d = {cfg.model.d}", "model.m_star")
    if cfg.model.m < cfg.model.m_star:
        fail(f"m = {cfg.model.m} is smaller than m_star = {cfg.model.m_star}", "model.m")
    return cfg


def get_value(cfg: ExperimentConfig, key: str):
    if key == "seed":
        return cfg.seed
    sec, name = key.split(".", 1)
    return getattr(getattr(cfg, sec), name)


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    lines: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", n)
        key, value = (s.strip() for s in body.split("=", 1))
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", n)
        set_value(cfg, key, value, n)
        lines[key] = n
    for key, value in (overrides or {}).items():
        set_value(cfg, key, value)
        lines.pop(key, None)
    return validate(cfg, lines)


def parse_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a config file (``None`` means all defaults) and apply overrides."""
    text = "" if path is None else Path(path).read_text()
    return parse_config_text(text, overrides)


def format_config(cfg: ExperimentConfig) -> str:
    """Render every key, one ``key = value`` line each, in a fixed order."""
    out = []
    for key in config_keys():
        value = get_value(cfg, key)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif value is None:
            text = "none"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"
