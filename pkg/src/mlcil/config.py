"""Experiment configuration: dataclasses, JSON loading, and validation.

Configs load from JSON with defaults for every omitted key. Unknown keys are
rejected so typos fail fast. Seed precedence at the CLI is flag over the
HCP_SEED environment variable over the config file value.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import DatasetConfig, build_cooccurrence
from .errors import ConfigError
from .losses import LossConfig

SEED_ENV_VAR = "HCP_SEED"

RE_STRATEGIES = ("off", "re", "static", "topk")


@dataclass
class ProtocolConfig:
    base_classes: int = 10
    increment: int = 2


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    base_lr: float = 1e-3
    incremental_lr: float = 5e-4
    weight_decay: float = 1e-4
    blocks: int = 3
    heads: int = 2
    fp: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.incremental_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.blocks < 1 or self.heads < 1:
            raise ConfigError("blocks and heads must be positive")


@dataclass
class ReConfig:
    strategy: str = "re"
    epsilon: float = 0.9
    top_k: int = 2
    sigma_coef: float = 0.0
    fallback_epsilon: float = 0.8
    queue_mode: str = "replace"
    ema_rho: float = 0.5

    def validate(self) -> None:
        if self.strategy not in RE_STRATEGIES:
            raise ConfigError(f"re.strategy must be one of {RE_STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"re.epsilon {self.epsilon} outside (0, 1)")
        if not 0.0 < self.fallback_epsilon < 1.0:
            raise ConfigError(f"re.fallback_epsilon {self.fallback_epsilon} outside (0, 1)")
        if self.top_k < 0:
            raise ConfigError("re.top_k must be non-negative")
        if self.queue_mode not in ("replace", "ema"):
            raise ConfigError(f"re.queue_mode must be replace or ema, got {self.queue_mode!r}")
        if not 0.0 <= self.ema_rho <= 1.0:
            raise ConfigError("re.ema_rho must lie in [0, 1]")


@dataclass
class ProbeUnknownConfig:
    enabled: bool = True
    alpha: float = 1.0
    beta: float = 1.0
    real_negative_targets: bool = False

    def validate(self) -> None:
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ConfigError("probe_unknown.alpha and .beta must be positive")


@dataclass
class OutConfig:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    re: ReConfig = field(default_factory=ReConfig)
    probe_unknown: ProbeUnknownConfig = field(default_factory=ProbeUnknownConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    out: OutConfig = field(default_factory=OutConfig)
    seed: int = 0

    def validate(self) -> None:
        self.train.validate()
        self.re.validate()
        self.probe_unknown.validate()
        self.loss.validate()
        base, inc = self.protocol.base_classes, self.protocol.increment
        n = self.dataset.num_classes
        if base < 0 or inc < 1 or base > n or (n - base) % inc != 0:
            raise ConfigError(f"protocol B{base}-C{inc} does not tile {n} classes")
        num_sessions = (1 if base > 0 else 0) + (n - base) // inc
        self.dataset.num_sessions = num_sessions
        if self.dataset.feature_dim % self.train.heads != 0:
            raise ConfigError(
                f"feature_dim {self.dataset.feature_dim} not divisible by {self.train.heads} heads"
            )
        if not self.train.fp and (self.re.strategy != "off" or self.probe_unknown.enabled):
            raise ConfigError("re and probe_unknown require fp (the purification path) to be enabled")
        self.dataset.validate()

    def to_dict(self) -> dict:
        payload = asdict(self)
        cooc = payload["dataset"]["cooccurrence"]
        if cooc is not None:
            payload["dataset"]["cooccurrence"] = np.asarray(cooc).tolist()
        return payload


def _build_section(cls, payload: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> ExperimentConfig:
    payload = dict(payload)
    sections = {
        "dataset": DatasetConfig,
        "protocol": ProtocolConfig,
        "train": TrainConfig,
        "re": ReConfig,
        "probe_unknown": ProbeUnknownConfig,
        "loss": LossConfig,
        "out": OutConfig,
    }
    kwargs = {}
    for name, cls in sections.items():
        section = dict(payload.pop(name, {}))
        if name == "dataset":
            # base_rate / cooccurrence_pairs are sugar for the full matrix
            base_rate = section.pop("base_rate", None)
            pairs = section.pop("cooccurrence_pairs", None)
            if section.get("cooccurrence") is not None:
                section["cooccurrence"] = np.asarray(section["cooccurrence"], dtype=np.float64)
            cfg = _build_section(cls, section, name)
            if cfg.cooccurrence is None and (base_rate is not None or pairs is not None):
                cfg.cooccurrence = build_cooccurrence(
                    cfg.num_classes,
                    base_rate=0.12 if base_rate is None else float(base_rate),
                    pairs=[tuple(p) for p in pairs] if pairs else None,
                )
            kwargs[name] = cfg
        else:
            kwargs[name] = _build_section(cls, section, name)
    seed = payload.pop("seed", 0)
    if payload:
        raise ConfigError(f"unknown top-level config keys: {sorted(payload)}")
    config = ExperimentConfig(seed=int(seed), **kwargs)
    config.validate()
    return config


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(payload)
