"""Serializable configuration with strict JSON parsing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import DomainPairSpec
from .routing import EVAL_MODES, METRICS


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class Anneal:
    a: float = 10.0
    b: float = 0.75


@dataclass
class TrainConfig:
    alpha: float = 1.5
    beta: float = 0.1
    lam: float | list[float] = 0.2
    tau: int = 16
    p: float = 0.6
    batch_per_domain: int = 36
    base_lr: float = 0.01
    momentum: float = 0.9
    anneal: Anneal = field(default_factory=Anneal)
    epochs: int = 15
    seed: int = 0
    classifier_lr_mult: float = 10.0
    adapt_lr_mult: float = 0.1
    freeze_norm: bool = True
    metric: str = "tanh_ratio"
    ema_decay: float = 0.9
    eval_mode: str = "frozen_ema"
    channels: tuple[int, ...] = (16, 32, 64)
    hidden_dim: int = 64
    calibration_samples: int = 256

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = Anneal(**self.anneal)
        self.channels = tuple(int(c) for c in self.channels)
        if isinstance(self.lam, tuple):
            self.lam = list(self.lam)
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        lams = self.lam if isinstance(self.lam, list) else [self.lam]
        if not lams or any(not 0.0 <= float(v) <= 1.0 for v in lams):
            raise ConfigError(f"lambda values must lie in [0, 1], got {self.lam!r}")
        if self.classifier_lr_mult <= 0 or self.adapt_lr_mult <= 0:
            raise ConfigError("learning-rate multipliers must be positive")
        if self.tau < 1 or self.batch_per_domain < 1 or self.epochs < 0:
            raise ConfigError("tau and batch_per_domain must be >= 1, epochs >= 0")
        if self.base_lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("base_lr must be positive and momentum in [0, 1)")
        if self.p < 0:
            raise ConfigError("p must be non-negative")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if not self.channels:
            raise ConfigError("at least one backbone stage is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        _reject_unknown(d, cls, "train")
        if "anneal" in d:
            _reject_unknown(d["anneal"], Anneal, "train.anneal")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class ReportToggles:
    attention: bool = True
    routing: bool = True


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DomainPairSpec = field(default_factory=DomainPairSpec)
    out_dir: str = "runs/default"
    reports: ReportToggles = field(default_factory=ReportToggles)

    def to_dict(self) -> dict:
        data = asdict(self.data)
        data["image_size"] = list(self.data.image_size)
        return {
            "train": self.train.to_dict(),
            "data": data,
            "out_dir": self.out_dir,
            "reports": asdict(self.reports),
        }

    @classmethod
    def from_dict(cls, d: Any) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, cls, "")
        train = TrainConfig.from_dict(d.get("train", {}))
        data_d = d.get("data", {})
        _reject_unknown(data_d, DomainPairSpec, "data")
        rep_d = d.get("reports", {})
        _reject_unknown(rep_d, ReportToggles, "reports")
        try:
            data = DomainPairSpec(**data_d)
            reports = ReportToggles(**rep_d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(train, data, str(d.get("out_dir", "runs/default")), reports)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _reject_unknown(d: Any, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or 'root'!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        allowed = (allowed - {"lam"}) | {"lambda", "lam"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)
