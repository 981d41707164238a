"""Experiment configuration: typed blocks, strict YAML loading and a stable digest.

A configuration file has up to six top-level blocks plus ``seed``::

    seed: 0
    data:        {classes, dim, per_class_train, per_class_test, spread}
    model:       {hidden, init_scale}
    partition:   {n_clients, alpha}
    scenario:    {kind, clients, classes, backdoor_fraction, trigger_value,
                  target_label, backdoor_clients}
    unlearning:  {pretrain_rounds, rounds, local_epochs, lr, batch_size, K,
                  keep_rate, probe_epochs, probe_clients,
                  normalize_by_param_count}
    evaluation:  {retrain_oracle, relearn_rounds, mia}

Every key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .fedengine import FedConfig
from .numcore import ConfigError

SCENARIO_KINDS = ("client", "class", "sample")


@dataclass(frozen=True)
class DataConfig:
    classes: int = 10
    dim: int = 16
    per_class_train: int = 200
    per_class_test: int = 100
    spread: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    init_scale: float = 0.3


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int = 10
    alpha: float = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "client"
    clients: tuple[int, ...] = (0,)  # client scenario: label-flipped clients to forget
    classes: tuple[int, ...] = (0,)  # class scenario: classes to forget
    backdoor_fraction: float = 0.1
    trigger_value: float = 3.0
    target_label: int = 0
    backdoor_clients: tuple[int, ...] | None = None  # None: every client is poisoned

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"scenario kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class UnlearningConfig:
    pretrain_rounds: int = 20
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    K: int = 2
    keep_rate: float = 0.1
    probe_epochs: int = 1
    probe_clients: str = "all"  # "all" or "remaining"
    normalize_by_param_count: bool = False

    def __post_init__(self):
        if self.probe_clients not in ("all", "remaining"):
            raise ConfigError("probe_clients must be 'all' or 'remaining'")
        if self.pretrain_rounds < 0 or self.probe_epochs < 1:
            raise ConfigError("pretrain_rounds must be >= 0 and probe_epochs >= 1")


@dataclass(frozen=True)
class EvaluationConfig:
    retrain_oracle: bool = True
    relearn_rounds: int = 5
    mia: bool = True

    def __post_init__(self):
        if self.relearn_rounds < 0:
            raise ConfigError("relearn_rounds must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    unlearning: UnlearningConfig = field(default_factory=UnlearningConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        self.fed()  # validates the shared federated fields
        layer_count = len(self.model.hidden) + 1
        if not 1 <= self.unlearning.K <= layer_count:
            raise ConfigError(f"K={self.unlearning.K} outside 1..{layer_count}")
        for c in self.scenario.clients + (self.scenario.backdoor_clients or ()):
            if not 0 <= c < self.partition.n_clients:
                raise ConfigError(f"client {c} outside [0, {self.partition.n_clients})")
        for c in self.scenario.classes + (self.scenario.target_label,):
            if not 0 <= c < self.data.classes:
                raise ConfigError(f"class {c} outside [0, {self.data.classes})")
        if self.scenario.kind == "class" and len(set(self.scenario.classes)) >= self.data.classes:
            raise ConfigError("cannot unlearn every class")
        if self.scenario.kind == "client" and len(set(self.scenario.clients)) >= self.partition.n_clients:
            raise ConfigError("cannot unlearn every client")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.data.dim, *self.model.hidden, self.data.classes]

    def fed(self, rounds: int | None = None) -> FedConfig:
        u = self.unlearning
        return FedConfig(
            n_clients=self.partition.n_clients,
            rounds=u.rounds if rounds is None else rounds,
            local_epochs=u.local_epochs,
            lr=u.lr,
            batch_size=u.batch_size,
            alpha=self.partition.alpha,
            K=u.K,
            keep_rate=u.keep_rate,
            seed=self.seed,
            workers=self.workers,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def digest(self) -> str:
        """SHA-256 prefix over every setting that can change results (``workers`` excluded)."""
        d = asdict(self)
        d.pop("workers")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_BLOCKS = {
    "data": DataConfig,
    "model": ModelConfig,
    "partition": PartitionConfig,
    "scenario": ScenarioConfig,
    "unlearning": UnlearningConfig,
    "evaluation": EvaluationConfig,
}


def _coerce(block: str, cls, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"block {block!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {block!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(value, list) or isinstance(default, tuple):
            if value is None:
                kwargs[key] = None
                continue
            if not isinstance(value, (list, tuple)):
                value = [value]
            kwargs[key] = tuple(int(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{block}.{key} must be true or false")
            kwargs[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{block}.{key} must be an integer")
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{block}.{key} must be a number")
            kwargs[key] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{block}.{key} must be a string")
            kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_BLOCKS) - {"seed", "workers"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {name: _coerce(name, cls, raw.get(name)) for name, cls in _BLOCKS.items()}
    for key in ("seed", "workers"):
        if key in raw:
            if isinstance(raw[key], bool) or not isinstance(raw[key], int):
                raise ConfigError(f"{key} must be an integer")
            kwargs[key] = raw[key]
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def config_to_yaml(config: ExperimentConfig) -> str:
    d = asdict(config)

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return yaml.safe_dump(plain(d), sort_keys=False)
