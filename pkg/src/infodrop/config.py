"""Training configuration: JSON in, validated dataclass out."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

NETWORKS = ("mlp", "all_cnn_32", "all_cnn_96")
ACTIVATIONS = ("relu", "softplus")
DROPOUT_KINDS = ("none", "binary", "info")
DATASET_NAMES = ("mnist", "cifar10", "cluttered", "occluded", "idrp")


@dataclass
class DatasetSpec:
    """Where the training data comes from.

    ``mnist``/``cifar10`` read the raw files under ``root`` (default
    ``$INFODROP_DATA_DIR``); ``cluttered``/``occluded`` are generated from
    them with ``seed``; ``idrp`` loads ``train_path``/``test_path`` caches.
    """

    name: str = "mnist"
    root: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    canvas: int = 96
    n_distractors: int = 21
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None


@dataclass
class TrainingConfig:
    network: str = "mlp"
    hidden_units: int = 128
    filter_fraction: float = 1.0
    activation: str = "relu"
    dropout_kind: str = "info"
    beta: float = 1.0
    alpha_max: float = 0.7
    epochs: int = 80
    base_lr: float = 0.07
    lr_drop_epochs: list[int] = field(default_factory=lambda: [30, 70])
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetSpec, self.dataset, "dataset.")
        self.validate()

    def validate(self) -> None:
        if self.network not in NETWORKS:
            raise ConfigError(f"network must be one of {NETWORKS}, got {self.network!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dropout_kind not in DROPOUT_KINDS:
            raise ConfigError(f"dropout_kind must be one of {DROPOUT_KINDS}, got {self.dropout_kind!r}")
        if not self.beta >= 0:
            raise ConfigError("beta must be ≥ 0")
        if not 0 < self.filter_fraction <= 1:
            raise ConfigError("filter_fraction must lie in (0, 1]")
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be ≥ 1")
        if not self.alpha_max > 0:
            raise ConfigError("alpha_max must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be ≥ 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be ≥ 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError("lr_drop_epochs must be increasing")
        if drops and (drops[0] < 1 or drops[-1] >= self.epochs):
            raise ConfigError("lr_drop_epochs must lie in [1, epochs)")
        if self.dataset.name not in DATASET_NAMES:
            raise ConfigError(f"dataset.name must be one of {DATASET_NAMES}, got {self.dataset.name!r}")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.base_lr * self.lr_drop_factor ** drops

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        d = self.to_dict()
        ds = dict(d.pop("dataset"))
        ds.update(changes.pop("dataset", {}) or {})
        d.update(changes)
        return config_from_dict({**d, "dataset": ds})


def _check_type(key: str, value: Any, default: Any, annotation: str) -> Any:
    if "int" in annotation and "float" not in annotation and "list" not in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            if value is None and "None" in annotation:
                return value
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    elif annotation.startswith("str"):
        if not isinstance(value, str) and not (value is None and "None" in annotation):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif annotation.startswith("list"):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
    return value


def _build(cls, raw: dict, prefix: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        annotation = str(fields[name].type)
        if name == "dataset" and cls is TrainingConfig:
            kwargs[name] = _build(DatasetSpec, value, "dataset.")
            continue
        kwargs[name] = _check_type(prefix + name, value, fields[name].default, annotation)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> TrainingConfig:
    return _build(TrainingConfig, raw)


def parse_config(path: str | os.PathLike, run_dir: str | os.PathLike | None = None) -> TrainingConfig:
    """Load a JSON config, fill defaults and optionally echo it to ``run_dir/config.json``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = config_from_dict(raw)
    if run_dir is not None:
        write_config(cfg, run_dir)
    return cfg


def write_config(cfg: TrainingConfig, run_dir: str | os.PathLike) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "config.json"
    p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return p
