"""Experiment configuration: nested dataclasses loaded from JSON.

Every section rejects unknown keys, so a typo cannot silently fall back to
a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..model import PRUNABLE, ModelConfig

__all__ = [
    "DataConfig",
    "TrainConfig",
    "PruneConfig",
    "ProbeConfig",
    "LccConfig",
    "ScanConfig",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "config_hash",
]

SELECTORS = ("probe", "random", "mse", "kl")
SCHEMES = ("unstructured", "semi_structured", "structured_heads")
TARGETS = ("attention_head", "ffn_output")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_samples: int = 4000
    min_len: int = 8
    max_len: int = 24
    recovery_samples: int = 100
    # optional JSONL overrides for the probe / recovery / evaluation splits
    probe_jsonl: str | None = None
    recovery_jsonl: str | None = None
    eval_jsonl: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    checkpoint: str | None = None  # load this dense model instead of training


@dataclass(frozen=True)
class PruneConfig:
    scheme: str = "unstructured"
    ratio: float = 0.5
    n: int = 2
    m: int = 4
    calib_samples: int = 128
    matrices: tuple = PRUNABLE


@dataclass(frozen=True)
class ProbeConfig:
    k: int = 1
    fraction: float = 0.25
    selector: str = "probe"
    lr: float = 1e-2
    epochs: int = 100
    train_fraction: float = 0.7


@dataclass(frozen=True)
class LccConfig:
    use_directions: bool = True
    use_bias: bool = True
    warm_start: bool = True
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 8
    target: str = "attention_head"
    loss_on: str = "all"


@dataclass(frozen=True)
class ScanConfig:
    k: int = 1
    scale: float = 1.0
    component: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    lcc: LccConfig = field(default_factory=LccConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.probe.fraction <= 1.0:
            raise ConfigError(f"probe.fraction must be in (0, 1], got {self.probe.fraction}")
        if self.probe.selector not in SELECTORS:
            raise ConfigError(f"probe.selector must be one of {SELECTORS}")
        if self.probe.k < 0:
            raise ConfigError("probe.k must be >= 0")
        if self.prune.scheme not in SCHEMES:
            raise ConfigError(f"prune.scheme must be one of {SCHEMES}")
        if not 0.0 <= self.prune.ratio < 1.0:
            raise ConfigError(f"prune.ratio must be in [0, 1), got {self.prune.ratio}")
        bad = set(self.prune.matrices) - set(PRUNABLE)
        if bad:
            raise ConfigError(f"prune.matrices has unknown names {sorted(bad)}")
        if self.lcc.target not in TARGETS:
            raise ConfigError(f"lcc.target must be one of {TARGETS}")
        if self.lcc.loss_on not in ("all", "response"):
            raise ConfigError("lcc.loss_on must be 'all' or 'response'")
        if self.data.recovery_samples < 1:
            raise ConfigError("data.recovery_samples must be >= 1")
        for name in ("probe_jsonl", "recovery_jsonl", "eval_jsonl"):
            p = getattr(self.data, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"data.{name}: file not found: {p}")
        if self.train.checkpoint is not None and not Path(self.train.checkpoint).is_file():
            raise ConfigError(f"train.checkpoint: file not found: {self.train.checkpoint}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prune"]["matrices"] = list(self.prune.matrices)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        """``replace(probe={"k": 3})`` updates fields of a section."""
        kw = {}
        for key, val in changes.items():
            cur = getattr(self, key)
            kw[key] = dataclasses.replace(cur, **val) if isinstance(val, dict) else val
        return dataclasses.replace(self, **kw)


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "probe": ProbeConfig,
    "lcc": LccConfig,
    "scan": ScanConfig,
}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if cls is PruneConfig and "matrices" in obj:
        obj = {**obj, "matrices": tuple(obj["matrices"])}
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(obj) - top)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kw = {}
    for key, val in obj.items():
        kw[key] = _build(_SECTIONS[key], val, key) if key in _SECTIONS else val
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)


def config_hash(obj) -> str:
    """Short SHA-256 of the canonical JSON encoding."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
