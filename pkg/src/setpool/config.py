"""Experiment configuration: nested dataclasses loaded from a versioned TOML file.

Unknown keys are rejected at every level.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .synth import ConfigError, GenConfig

CONFIG_VERSION = 1


@dataclass
class DatasetConfig:
    path: str | None = None
    generate: GenConfig | None = None


@dataclass
class AgentConfig:
    gamma: float = 0.999
    lam: float = 0.1
    lr_min: float = 1e-4
    lr_max: float = 10 ** -3.3
    head_hidden: int = 64


@dataclass
class TrainingConfig:
    algorithm: str = "off"  # "on" or "off"
    episodes: int = 1500
    head_warmup_steps: int = 200
    head_warmup_lr: float = 1e-2
    head_lr: float = 1e-3
    replay_steps: int = 1
    temporal_steps: int = 300
    temporal_lr: float = 1e-3
    temporal_batch: int = 8
    mlpgr_steps: int = 200
    mlpgr_lr: float = 1e-3
    mlpgr_batch: int = 8


@dataclass
class OffPolicyConfig:
    xi: float = 1.0
    alpha: float = 0.995
    c: float = 5.0
    capacity: int = 50
    batch_size: int = 16


@dataclass
class TerminationConfig:
    mode: str = "full_traversal"  # or "softmax"
    threshold: float = 0.5


@dataclass
class PGRConfig:
    mode: str = "none"  # "none", "parameter_free", "metric_learning"
    beta: float = 1.0
    phi: float = 5.0
    normalize_masses: bool = False
    literal_missing: bool = False


@dataclass
class TemporalConfig:
    enabled: bool = False


@dataclass
class EvalConfig:
    protocol: str = "closed_id"  # "verification", "closed_id", "open_id"
    far: list[float] = field(default_factory=lambda: [0.01, 0.1])
    fpir: list[float] = field(default_factory=lambda: [0.01, 0.1])
    ranks: list[int] = field(default_factory=lambda: [1, 5, 10])
    withheld_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    offpolicy: OffPolicyConfig = field(default_factory=OffPolicyConfig)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    pgr: PGRConfig = field(default_factory=PGRConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.agent.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0 <= self.agent.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0 < self.agent.lr_min <= self.agent.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if self.training.algorithm not in ("on", "off"):
            raise ConfigError("training.algorithm must be 'on' or 'off'")
        if self.training.episodes < 0:
            raise ConfigError("training.episodes must be >= 0")
        if self.termination.mode not in ("full_traversal", "softmax"):
            raise ConfigError("termination.mode must be 'full_traversal' or 'softmax'")
        if not 0 < self.termination.threshold <= 1:
            raise ConfigError("termination.threshold must be in (0, 1]")
        if self.pgr.mode not in ("none", "parameter_free", "metric_learning"):
            raise ConfigError(f"unknown pgr.mode {self.pgr.mode!r}")
        if self.pgr.beta <= 0 or self.pgr.phi <= 0:
            raise ConfigError("pgr.beta and pgr.phi must be positive")
        if self.eval.protocol not in ("verification", "closed_id", "open_id"):
            raise ConfigError(f"unknown eval.protocol {self.eval.protocol!r}")
        if self.eval.protocol == "open_id" and self.termination.mode == "softmax":
            raise ConfigError("softmax termination cannot be used for open-set identification")
        if any(not 0 < v < 1 for v in self.eval.far + self.eval.fpir):
            raise ConfigError("FAR/FPIR grid values must be in (0, 1)")
        if any(k < 1 for k in self.eval.ranks):
            raise ConfigError("ranks must be >= 1")
        if not 0 <= self.eval.withheld_fraction < 1:
            raise ConfigError("eval.withheld_fraction must be in [0, 1)")
        if self.dataset.path is None and self.dataset.generate is None:
            raise ConfigError("dataset needs either 'path' or a [dataset.generate] table")
        if self.dataset.generate is not None:
            self.dataset.generate.validate()
        try:
            from .offpolicy import TrustRegionConfig
            TrustRegionConfig(**dataclasses.asdict(self.offpolicy))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def termination_threshold(self) -> float | None:
        return self.termination.threshold if self.termination.mode == "softmax" else None


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None and value is not None:
            kwargs[name] = _build(sub, value, path)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "agent"): AgentConfig,
    (ExperimentConfig, "training"): TrainingConfig,
    (ExperimentConfig, "offpolicy"): OffPolicyConfig,
    (ExperimentConfig, "termination"): TerminationConfig,
    (ExperimentConfig, "pgr"): PGRConfig,
    (ExperimentConfig, "temporal"): TemporalConfig,
    (ExperimentConfig, "eval"): EvalConfig,
    (DatasetConfig, "generate"): GenConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if "version" not in data:
        raise ConfigError("config must declare 'version'")
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def load_gen_config(path) -> GenConfig:
    """A data-generation config: either a bare GenConfig table or a full experiment config."""
    try:
        data = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "dataset" in data or "version" in data:
        cfg = config_from_dict(data)
        if cfg.dataset.generate is None:
            raise ConfigError("config has no [dataset.generate] table")
        return cfg.dataset.generate
    return _build(GenConfig, data, "generate")
