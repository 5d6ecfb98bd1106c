"""Experiment configuration: nested dataclasses loaded from a strict JSON document."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..models import ModelTrainConfig
from ..policy import OptimConfig


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration; the message names the offending field."""


@dataclass
class EnvConfig:
    name: str = "point2d"
    horizon: int = 30
    noise_sigma: float = 0.0


@dataclass
class PolicyConfig:
    hidden: tuple = (64, 64)
    init_std: float = 0.1


@dataclass
class ValueConfig:
    hidden: tuple = (64, 64)
    epochs: int = 10
    minibatch_size: int = 500
    learning_rate: float = 1e-3
    lr_final_fraction: float = 0.1


@dataclass
class LoopConfig:
    iterations: int = 10
    real_trajectories: int = 5
    policy_updates: int = 5
    virtual_trajectories: int = 200
    eval_trajectories: int = 20
    return_threshold: float | None = None


@dataclass
class CalibrationConfig:
    pairs: int = 5000
    real_trajectories: int = 3000
    value_hidden: tuple = (32, 32)
    value_virtual_per_epoch: int = 100
    value_minibatch_size: int = 200
    value_learning_rate: float = 5e-5
    value_passes: int = 10
    value_epochs: tuple = (0, 5, 10, 15)
    q_rollouts: int = 64
    model_batch_size: int = 500


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelTrainConfig = field(default_factory=ModelTrainConfig)
    value: ValueConfig = field(default_factory=ValueConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    gamma: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for name, value in doc.items():
        sub = _SECTIONS.get((cls, name))
        key = f"{path}.{name}" if path else name
        if sub is not None:
            kwargs[name] = _build(sub, value, key)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    (ExperimentConfig, "env"): EnvConfig,
    (ExperimentConfig, "model"): ModelTrainConfig,
    (ExperimentConfig, "value"): ValueConfig,
    (ExperimentConfig, "policy"): PolicyConfig,
    (ExperimentConfig, "optim"): OptimConfig,
    (ExperimentConfig, "loop"): LoopConfig,
    (ExperimentConfig, "calibration"): CalibrationConfig,
}


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validation_errors(cfg: ExperimentConfig) -> list[str]:
    errors = []
    if not _is_number(cfg.gamma) or not 0.0 < cfg.gamma <= 1.0:
        errors.append(f"gamma must lie in (0, 1], got {cfg.gamma}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        errors.append(f"seed must be a nonnegative integer, got {cfg.seed}")
    if cfg.env.name not in ("point2d", "point3d"):
        errors.append(f"env.name must be point2d or point3d, got {cfg.env.name!r}")
    if cfg.env.horizon < 1:
        errors.append("env.horizon must be >= 1")
    if cfg.env.noise_sigma < 0:
        errors.append("env.noise_sigma must be >= 0")
    for name in ("iterations", "real_trajectories", "policy_updates", "virtual_trajectories", "eval_trajectories"):
        if getattr(cfg.loop, name) < 1:
            errors.append(f"loop.{name} must be >= 1")
    errors += [f"model: {e}" for e in cfg.model.validate()]
    errors += [f"optim: {e}" for e in cfg.optim.validate()]
    if cfg.value.epochs < 1 or cfg.value.minibatch_size < 1:
        errors.append("value.epochs and value.minibatch_size must be >= 1")
    if cfg.value.learning_rate <= 0:
        errors.append("value.learning_rate must be > 0")
    if cfg.policy.init_std <= 0:
        errors.append("policy.init_std must be > 0")
    cal = cfg.calibration
    if min(cal.pairs, cal.real_trajectories, cal.value_virtual_per_epoch, cal.value_passes, cal.q_rollouts) < 1:
        errors.append("calibration counts must be >= 1")
    if any(e < 0 for e in cal.value_epochs):
        errors.append("calibration.value_epochs must be >= 0")
    return errors


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    errors = validation_errors(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def config_from_dict(doc: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, doc, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate_config(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)
