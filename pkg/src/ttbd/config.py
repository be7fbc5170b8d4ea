"""Flat key=value experiment configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

DEFAULT_DATA = "/root/data/mnist"

# Fields that determine the trained checkpoint; everything else is defense-side.
TRAINING_KEYS = (
    "dataset_path", "dataset_format", "architecture", "attack", "target_label", "trigger_seed",
    "poison_rate", "train_epochs", "train_lr", "train_momentum", "train_batch_size", "seed",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: str = DEFAULT_DATA
    dataset_format: str = "mnist"
    architecture: str = "reference-cnn"
    attack: str = "badnets"
    target_label: int = 0
    trigger_seed: int = 1234
    poison_rate: float = 0.1
    train_epochs: int = 2
    train_lr: float = 0.02
    train_momentum: float = 0.9
    train_batch_size: int = 64
    batch_size: int = 100
    batch_rate: float = 0.1
    sparse_batches: int = 20
    sparse_rate: float = 0.01
    detect_method: str = "ddp"
    ddp_n_detect: int = 6
    teco_n_detect: int = 10
    ddp_theta: float = 0.75
    ddp_step: int = 2
    ddp_keep: float = 0.8
    # summary/normalize/budget_fraction per view, comma separated
    ddp_views: str = "mean/none/0.015,mean/zscore/0.015,max/zscore/0.015,max/zscore/0.025"
    ddp_candidates: str = "conv"
    shapley_T: int = 40
    shapley_eps_asr: float = 0.2
    shapley_eps_acc: float = 0.3
    repair_k: int = 30
    repair_m: int = 174
    repair_asr_target: float = 0.34  # at most two of six detected samples keep their label
    repair_margin: int = 3
    acc_holdout: int = 10  # top detection ranks left out of the ACC-Shapley batch
    repair_max_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.detect_method not in ("ddp", "teco", "dual"):
            raise ConfigError(f"detect_method must be ddp, teco or dual, got {self.detect_method!r}")
        for name in ("poison_rate", "batch_rate", "sparse_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.sparse_batches < 1:
            raise ConfigError("batch sizes and counts must be positive")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {n}: unknown or malformed entry {raw!r}")
            values[key] = _coerce(types[key], value, key)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self, keys=None) -> str:
        text = self.to_text() if keys is None else "".join(f"{k}={getattr(self, k)}\n" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def training_digest(self) -> str:
        return self.digest(TRAINING_KEYS)


def _coerce(type_name: str, value: str, key: str):
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from e
    return value
