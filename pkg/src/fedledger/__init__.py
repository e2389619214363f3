"""Federated training of a conv + single-LSTM activity classifier with a hash-chained update ledger."""

from .aggregation import ClientUpdate, ServerState, StrategyConfig, StrategyKind, aggregate
from .config import ExperimentConfig, load_config, protocol_config
from .estimators import (ChannelStandardizer, ConvLSTMClassifier, FederatedConvLSTMClassifier,
                         SlidingWindowSegmenter)
from .ledger import Ledger, LedgerConfig, verify_chain
from .metrics import Metrics, improvement_table
from .model import ModelConfig, TrainConfig
from .orchestrator import run_centralized, run_federated, run_sweep
from .params import ParameterSet, digest

__version__ = "0.1.0"

__all__ = [
    "ChannelStandardizer",
    "ClientUpdate",
    "ConvLSTMClassifier",
    "ExperimentConfig",
    "FederatedConvLSTMClassifier",
    "Ledger",
    "LedgerConfig",
    "Metrics",
    "ModelConfig",
    "ParameterSet",
    "ServerState",
    "SlidingWindowSegmenter",
    "StrategyConfig",
    "StrategyKind",
    "TrainConfig",
    "aggregate",
    "digest",
    "improvement_table",
    "load_config",
    "protocol_config",
    "run_centralized",
    "run_federated",
    "run_sweep",
    "verify_chain",
]
