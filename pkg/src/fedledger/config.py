"""Experiment configuration: dataclasses, JSON loading and dotted-path overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .aggregation import StrategyConfig, StrategyKind
from .data import PARTITION_MODES
from .ledger import LedgerConfig
from .model import ModelConfig, TrainConfig

PROTOCOL_HIDDEN_UNITS = (128, 256, 512)
ALL_STRATEGIES = tuple(k.value for k in StrategyKind)


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # "synthetic" or "csv"
    name: str = "synthetic"
    num_classes: int = 6
    samples_per_class: int = 1500
    sample_rate_hz: int = 50
    noise_std: float = 0.2
    csv_path: str | None = None
    label_map: dict[str, int] | None = None
    stride: int | None = None  # defaults to half the model window

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.csv_path:
            raise ConfigError("dataset.csv_path is required when dataset.kind is 'csv'")


@dataclass
class SweepSpec:
    hidden_units: list[int] = field(default_factory=lambda: list(PROTOCOL_HIDDEN_UNITS))
    strategies: list[str] = field(default_factory=lambda: list(ALL_STRATEGIES))

    def __post_init__(self) -> None:
        if not self.hidden_units or not self.strategies:
            raise ConfigError("sweep lists must be non-empty")
        self.strategies = [StrategyKind.parse(s).value for s in self.strategies]


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    num_clients: int = 3
    rounds: int = 20
    folds: int = 5
    runs: int = 5
    partition: str = "iid"
    experiment_seed: int = 0
    max_folds: int | None = None  # evaluate only the first N folds
    workers: int = 1

    def __post_init__(self) -> None:
        if self.num_clients < 1 or self.runs < 1 or self.rounds < 0 or self.workers < 1:
            raise ConfigError("num_clients, runs and workers must be >= 1 and rounds >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.max_folds is not None and not 1 <= self.max_folds <= self.folds:
            raise ConfigError("max_folds must lie in [1, folds]")
        if self.partition not in PARTITION_MODES:
            raise ConfigError(f"partition must be one of {PARTITION_MODES}")
        if self.dataset.kind == "synthetic" and self.dataset.num_classes != self.model.num_classes:
            raise ConfigError("dataset.num_classes must equal model.num_classes")
        if self.model.in_channels != 3:
            raise ConfigError("the data pipeline produces 3-channel windows; model.in_channels must be 3")
        if not 0 <= self.experiment_seed < 2**64:
            raise ConfigError("experiment_seed must fit in 64 bits")

    @property
    def fold_count(self) -> int:
        return self.folds if self.max_folds is None else self.max_folds

    @property
    def stride(self) -> int:
        return self.dataset.stride or max(1, self.model.window_len // 2)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strategy"] = self.strategy.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        merged = merge_known(default_config_dict(), obj)
        return _build(merged)

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        for key, value in changes.items():
            set_dotted(data, key, value)
        return _build(data)


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()


def _build(data: dict) -> ExperimentConfig:
    sections = {
        "dataset": DatasetSpec,
        "model": ModelConfig,
        "train": TrainConfig,
        "strategy": StrategyConfig,
        "ledger": LedgerConfig,
        "sweep": SweepSpec,
    }
    try:
        kwargs = {name: ctor(**data[name]) for name, ctor in sections.items()}
        top = {f.name: data[f.name] for f in fields(ExperimentConfig) if f.name not in sections}
        return ExperimentConfig(**kwargs, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def merge_known(base: dict, update: dict, prefix: str = "") -> dict:
    """Deep-merge ``update`` into a copy of ``base``; keys absent from ``base`` are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "label_map":
            out[key] = merge_known(out[key], value, prefix=f"{path}.")
        else:
            out[key] = value
    return out


def set_dotted(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=VALUE``; VALUE is read as JSON when possible, else as a plain string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: list[str] = (),
                seed: int | None = None) -> ExperimentConfig:
    data = default_config_dict()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        data = merge_known(data, loaded)
    for text in overrides:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    if seed is not None:
        data["experiment_seed"] = seed
    return _build(data)


def protocol_config(sample_rate_hz: int = 50, hidden_units: int = 128, **changes) -> ExperimentConfig:
    """3 clients, 5 folds, 5 runs, Adam 1e-4 / 1e-6, one-second windows.

    The conv filter width scales with the sampling rate: 11 at 50 Hz, 21 at 100 Hz.
    """
    filter_size = 21 if sample_rate_hz >= 100 else 11
    config = ExperimentConfig(
        dataset=DatasetSpec(sample_rate_hz=sample_rate_hz),
        model=ModelConfig(window_len=sample_rate_hz, filter_size=filter_size, hidden_units=hidden_units),
        train=TrainConfig(learning_rate=1e-4, weight_decay=1e-6),
        num_clients=3,
        folds=5,
        runs=5,
    )
    return config.replace(**changes) if changes else config
