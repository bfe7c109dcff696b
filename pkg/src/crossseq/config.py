"""Experiment configuration: dataclasses, YAML loading, content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .cfd import LcscConfig
from .data import PhantomConfig
from .losses import LossWeights
from .segnet import SegNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "phantom"          # "phantom" or "dir"
    path: Optional[str] = None       # subject directory root when source == "dir"
    n_subjects: int = 10
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    labeled_fraction: float = 0.2
    n_test: int = 2
    axis: int = -1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    steps_per_epoch: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)
    lcsc_t1: LcscConfig = field(default_factory=LcscConfig)
    lcsc_fa: LcscConfig = field(default_factory=LcscConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    gamma: float = 0.99
    M: int = 3
    threshold: float = 0.05
    epsilon: float = 1.01
    use_dcp: bool = True
    use_cse: bool = True
    use_cfd: bool = True
    use_unlabeled: bool = True
    input_combo: str = "t1+fa"
    dcp_on_unlabeled: bool = True
    cse_input: str = "clean"          # "clean" or "noisy" features for the gated consistency loss
    augment: bool = True
    eval_model: str = "teacher"       # "teacher" or "student"
    binarize_threshold: float = 0.5
    audit_teacher: bool = False
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive")
        if self.epsilon <= 1:
            raise ConfigError("epsilon must exceed 1")
        if self.cse_input not in ("clean", "noisy"):
            raise ConfigError("cse_input must be 'clean' or 'noisy'")
        if self.eval_model not in ("teacher", "student"):
            raise ConfigError("eval_model must be 'teacher' or 'student'")
        if self.data.source not in ("phantom", "dir"):
            raise ConfigError("data.source must be 'phantom' or 'dir'")
        if self.data.source == "dir" and not self.data.path:
            raise ConfigError("data.path is required when data.source == 'dir'")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; dotted keys (``"weights.alpha"``) reach nested sections."""
        return from_dict(_set_dotted(to_dict(self), changes))


def _set_dotted(d: dict, changes: dict) -> dict:
    for key, value in changes.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return d


def to_dict(cfg) -> dict:
    return asdict(cfg)


def _build(cls, values: Any):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "weights"): LossWeights,
    (ExperimentConfig, "lcsc_t1"): LcscConfig,
    (ExperimentConfig, "lcsc_fa"): LcscConfig,
    (ExperimentConfig, "segnet"): SegNetConfig,
    (DataConfig, "phantom"): PhantomConfig,
}


def from_dict(values: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with Path(path).open() as fh:
        values = yaml.safe_load(fh) or {}
    return from_dict(values)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = json.loads(json.dumps(to_dict(cfg)))  # tuples -> lists
    with path.open("w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


__all__ = ["ConfigError", "DataConfig", "ExperimentConfig", "config_hash", "from_dict", "load_config",
           "save_config", "to_dict"]
