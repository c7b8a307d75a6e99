"""Run configuration files (YAML, versioned schema) and their canonical hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .objective import ObjectiveConfig
from .trainer import STUDENT, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one ``field: message`` per problem."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Section):
    name: str
    params: dict = Field(default_factory=dict)


class PolicySection(_Section):
    kind: Literal["table", "mlp"] = "table"
    window: int = Field(2, ge=1)
    shared: bool = False
    hidden: int = Field(16, ge=1)


class ObjectiveSection(_Section):
    clip_eps: float = Field(0.2, gt=0, lt=1)
    kl_coeff: float = Field(0.01, ge=0)
    advantage_eps: float = Field(1e-8, ge=0)
    length_normalize: bool = True
    kl_mode: Literal["k3", "exact"] = "k3"
    duplicate_weight: float = Field(1.0, ge=0)
    kl_coeff_overrides: dict[str, float] = Field(default_factory=dict)


class TrainSection(_Section):
    n_steps: int = Field(ge=0)
    batch_size: int = Field(4, ge=1)
    rollouts_per_example: int = Field(12, ge=1)
    group_size: int = Field(ge=1)
    lr: float = Field(2.0, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    padding_mode: Literal["truncate", "fill"] = "fill"
    fallback_reward: float = 0.0
    snapshot_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _group_fits(self):
        if self.group_size > self.rollouts_per_example:
            raise ValueError("group_size must not exceed rollouts_per_example")
        return self


class StageSection(_Section):
    mode: Literal["plain", "better-together"] = "plain"
    init_bank: Optional[str] = None
    po_teacher_rollouts: int = Field(0, ge=0)


class RunConfig(_Section):
    schema_version: Literal[1]
    seed: int = 0
    env: EnvSection
    policy: PolicySection = Field(default_factory=PolicySection)
    objective: ObjectiveSection = Field(default_factory=ObjectiveSection)
    train: TrainSection
    stage: StageSection = Field(default_factory=StageSection)
    eval_rollouts: int = Field(100, ge=0)

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        o = self.objective
        return TrainConfig(
            n_steps=self.train.n_steps,
            batch_size=self.train.batch_size,
            rollouts={STUDENT: self.train.rollouts_per_example},
            group_size=self.train.group_size,
            lr=self.train.lr,
            weight_decay=self.train.weight_decay,
            objective=ObjectiveConfig(o.clip_eps, o.kl_coeff, o.advantage_eps, o.length_normalize,
                                      o.kl_mode, o.duplicate_weight),
            kl_coeff_overrides=dict(o.kl_coeff_overrides),
            padding_mode=self.train.padding_mode,
            fallback_reward=self.train.fallback_reward,
            seed=self.seed,
            snapshot_every=self.train.snapshot_every,
        )


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "missing":
            msg = "required field missing"
        out.append(f"{loc}: {msg}")
    return out


def parse_config(data, overrides: Optional[dict] = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    data = dict(data)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        section, _, name = k.rpartition(".")
        target = data
        if section:
            target = data.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError([f"{section}: expected a mapping"])
            target = dict(target)
            data[section] = target
        target[name] = v
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML ({exc})"]) from None
    return parse_config(data, overrides)
