"""Federated and centralized experiment drivers.

Each (fold, run) cell gets its own partition, Glorot init and ledger; seeds
for every stream come from :func:`derive_seed`, so an experiment is a pure
function of its configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregation import ClientUpdate, ServerState, StrategyConfig, StrategyKind, aggregate
from .config import ExperimentConfig
from .data import (WindowedDataset, gen_synthetic, kfold_split, load_csv, normalize,
                   partition_clients, window)
from .ledger import Block, Ledger, ProposalRejected, propose
from .metrics import METRIC_NAMES, Metrics, improvement_table, mean_macro
from .model import ModelConfig, TrainConfig, evaluate, init_glorot, local_train
from .params import ParameterSet, digest

log = logging.getLogger(__name__)

RETRIES = 1


def derive_seed(experiment_seed: int, *parts) -> int:
    """Lower 64 bits of SHA-256 over the seed and a label tuple."""
    text = "/".join(str(p) for p in (experiment_seed, *parts))
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[-8:], "big")


@dataclass
class RoundResult:
    state: ServerState
    committed: bool
    block: Block | None = None
    updates: list[ClientUpdate] = field(default_factory=list)
    reason: str = ""


def client_train_config(train: TrainConfig, strategy: StrategyConfig, seed: int) -> TrainConfig:
    mu = strategy.prox_mu if strategy.kind is StrategyKind.FEDPROX else train.prox_mu
    return replace(train, prox_mu=mu, seed=seed)


def run_round(state: ServerState, clients: Sequence[WindowedDataset], model_config: ModelConfig,
              train_config: TrainConfig, strategy_config: StrategyConfig, ledger: Ledger,
              seed_for: Callable[[int, int], int] | None = None,
              tamper: Callable[[ParameterSet], ParameterSet] | None = None,
              workers: int = 1,
              trainer: Callable[..., ClientUpdate] = local_train) -> RoundResult:
    """Train every client from the current global model, aggregate and commit.

    ``seed_for(client_id, round)`` supplies each client's batch-order seed.
    ``tamper`` lets tests make the server claim a different aggregate than the
    honest one; peers then refuse and the round is reported as failed.
    """
    if not ledger.blocks:
        raise ProposalRejected("ledger must hold a genesis block before the first round")
    round_no = state.round + 1
    seed_for = seed_for or (lambda client, rnd: derive_seed(train_config.seed, client, rnd))

    def train_one(client_id: int) -> ClientUpdate:
        cfg = client_train_config(train_config, strategy_config, seed_for(client_id, round_no))
        return trainer(state.global_params, clients[client_id], model_config, cfg,
                       client_id=client_id, round=round_no)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(train_one, range(len(clients))))
    else:
        updates = [train_one(c) for c in range(len(clients))]

    reason = ""
    for attempt in range(RETRIES + 1):
        candidate = aggregate(strategy_config.kind, state, updates, strategy_config)
        claimed = tamper(candidate.global_params) if tamper else candidate.global_params
        proposal = propose(round_no, strategy_config.kind, updates, claimed, strategy_config, state)
        endorsements = ledger.endorse_all(proposal, updates, state, strategy_config)
        try:
            block = ledger.order_and_append(proposal, endorsements)
        except ProposalRejected as exc:
            reason = str(exc)
            log.warning("round %d attempt %d rejected: %s", round_no, attempt + 1, reason)
            continue
        return RoundResult(replace(candidate, global_params=claimed), True, block, updates)
    return RoundResult(state, False, None, updates, reason)


@dataclass
class CellResult:
    fold: int
    run: int
    metrics: Metrics
    final_digest: str
    committed_rounds: int
    failed_rounds: list[int] = field(default_factory=list)
    ledger_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "run": self.run,
            "metrics": self.metrics.to_dict(),
            "final_digest": self.final_digest,
            "committed_rounds": self.committed_rounds,
            "failed_rounds": self.failed_rounds,
            "ledger_path": self.ledger_path,
        }


@dataclass
class ExperimentResult:
    mode: str  # "federated" or "centralized"
    config: ExperimentConfig
    cells: list[CellResult]
    timings: dict[str, float] = field(default_factory=dict)
    ledgers: dict[tuple[int, int], Ledger] = field(default_factory=dict, repr=False)
    final_params: dict[tuple[int, int], ParameterSet] = field(default_factory=dict, repr=False)

    @property
    def label(self) -> str:
        return self.config.strategy.kind.value if self.mode == "federated" else "Centralized"

    @property
    def mean(self) -> dict[str, float]:
        """Macro metrics averaged over runs within each fold, then over folds."""
        folds = sorted({c.fold for c in self.cells})
        per_fold = [mean_macro([c.metrics for c in self.cells if c.fold == f]) for f in folds]
        return {m: float(np.mean([pf[m] for pf in per_fold])) for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        # timings are kept out so identical configs serialize to identical bytes
        return {
            "mode": self.mode,
            "label": self.label,
            "dataset": self.config.dataset.name,
            "hidden_units": self.config.model.hidden_units,
            "experiment_seed": self.config.experiment_seed,
            "config": self.config.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
            "mean": self.mean,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def result_filename(config: ExperimentConfig, mode: str) -> str:
    label = config.strategy.kind.value if mode == "federated" else "centralized"
    return f"result_{label.lower()}_h{config.model.hidden_units}_s{config.experiment_seed}.json"


def ledger_filename(config: ExperimentConfig, fold: int, run: int) -> str:
    return (f"ledger_{config.strategy.kind.value.lower()}_h{config.model.hidden_units}"
            f"_s{config.experiment_seed}_f{fold}_r{run}.jsonl")


def load_dataset(config: ExperimentConfig) -> WindowedDataset:
    spec = config.dataset
    if spec.kind == "synthetic":
        record = gen_synthetic(spec.num_classes, spec.samples_per_class, spec.sample_rate_hz,
                               derive_seed(config.experiment_seed, "data"), spec.noise_std)
    else:
        record = load_csv(spec.csv_path, spec.sample_rate_hz, spec.label_map)
    return window(record, config.model.window_len, config.stride, config.model.num_classes)


@dataclass
class _Cell:
    fold: int
    run: int
    clients: list[WindowedDataset]
    test: WindowedDataset
    init: ParameterSet


def _cells(config: ExperimentConfig, dataset: WindowedDataset | None = None):
    """Yield the per-(fold, run) data split, client shards and initial parameters."""
    dataset = dataset if dataset is not None else load_dataset(config)
    seed = config.experiment_seed
    splits = kfold_split(dataset.labels, config.folds, derive_seed(seed, "kfold"))
    for fold in range(config.fold_count):
        train_idx, test_idx = splits[fold]
        train, stats = normalize(dataset.subset(train_idx))
        test, _ = normalize(dataset.subset(test_idx), stats)
        for run in range(config.runs):
            plan = partition_clients(train.labels, config.num_clients, config.partition,
                                     derive_seed(seed, "partition", fold, run))
            clients = [train.subset(plan.client_indices(c)) for c in range(config.num_clients)]
            init = init_glorot(config.model, derive_seed(seed, "init", fold, run))
            yield _Cell(fold, run, clients, test, init)


def _train_seed(config: ExperimentConfig, fold: int, run: int):
    return lambda client, rnd: derive_seed(config.experiment_seed, "train", fold, run, client, rnd)


def run_federated(config: ExperimentConfig, out_dir: str | Path | None = None,
                  dataset: WindowedDataset | None = None,
                  tamper: Callable[[ParameterSet], ParameterSet] | None = None) -> ExperimentResult:
    """Federated training and evaluation for every (fold, run) cell.

    With ``out_dir`` each cell's ledger is written there as JSON Lines.
    """
    timings = {"train": 0.0, "evaluate": 0.0}
    result = ExperimentResult("federated", config, [], timings)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for cell in _cells(config, dataset):
        try:
            t0 = time.perf_counter()
            ledger = Ledger(config=config.ledger)
            ledger.genesis(cell.init, config.strategy.kind.value)
            state = ServerState(cell.init, None, 0)
            failed = []
            for slot in range(1, config.rounds + 1):
                outcome = run_round(state, cell.clients, config.model, config.train, config.strategy,
                                    ledger, seed_for=_train_seed(config, cell.fold, cell.run),
                                    tamper=tamper, workers=config.workers)
                if not outcome.committed:
                    failed.append(slot)
                state = outcome.state
            t1 = time.perf_counter()
            metrics = evaluate(state.global_params, cell.test, config.model)
            timings["train"] += t1 - t0
            timings["evaluate"] += time.perf_counter() - t1
        except Exception as exc:
            raise RuntimeError(f"fold {cell.fold} run {cell.run}: {exc}") from exc
        path = None
        if out_dir is not None:
            path = Path(out_dir) / ledger_filename(config, cell.fold, cell.run)
            ledger.save(path)
            path = path.name
        result.cells.append(CellResult(cell.fold, cell.run, metrics, digest(state.global_params).hex(),
                                       len(ledger) - 1, failed, path))
        result.ledgers[(cell.fold, cell.run)] = ledger
        result.final_params[(cell.fold, cell.run)] = state.global_params
        log.info("federated %s fold %d run %d macro F1 %.4f", config.strategy.kind.value,
                 cell.fold, cell.run, metrics.macro_f1)
    return result


def train_alone(init: ParameterSet, shard: WindowedDataset, config: ExperimentConfig,
                fold: int, run: int, client_id: int = 0) -> ParameterSet:
    """``rounds`` x ``local_epochs`` epochs on one shard with no aggregation.

    Training is cut into ``rounds`` segments that reuse the federated seed schedule
    of ``client_id`` and restart the optimizer, so it matches that client training
    as the only federation member.
    """
    seed_for = _train_seed(config, fold, run)
    params = init
    for rnd in range(1, config.rounds + 1):
        cfg = replace(config.train, prox_mu=0.0, seed=seed_for(client_id, rnd))
        params = local_train(params, shard, config.model, cfg, client_id=client_id, round=rnd).params
    return params


def centralized_train(init: ParameterSet, clients: Sequence[WindowedDataset], config: ExperimentConfig,
                      fold: int, run: int) -> ParameterSet:
    """One trainer over the union of client shards (concatenated in client order)."""
    union = WindowedDataset(
        np.concatenate([c.windows for c in clients]),
        np.concatenate([c.labels for c in clients]),
        clients[0].window_len, clients[0].stride, clients[0].num_classes,
    )
    return train_alone(init, union, config, fold, run)


def run_centralized(config: ExperimentConfig, dataset: WindowedDataset | None = None) -> ExperimentResult:
    timings = {"train": 0.0, "evaluate": 0.0}
    result = ExperimentResult("centralized", config, [], timings)
    for cell in _cells(config, dataset):
        try:
            t0 = time.perf_counter()
            params = centralized_train(cell.init, cell.clients, config, cell.fold, cell.run)
            t1 = time.perf_counter()
            metrics = evaluate(params, cell.test, config.model)
            timings["train"] += t1 - t0
            timings["evaluate"] += time.perf_counter() - t1
        except Exception as exc:
            raise RuntimeError(f"fold {cell.fold} run {cell.run}: {exc}") from exc
        result.cells.append(CellResult(cell.fold, cell.run, metrics, digest(params).hex(), config.rounds))
        result.final_params[(cell.fold, cell.run)] = params
    return result


def run_local_only(config: ExperimentConfig, dataset: WindowedDataset | None = None) -> list[list[Metrics]]:
    """Each client trained on its own shard only; metrics per cell, one entry per client."""
    out = []
    for cell in _cells(config, dataset):
        out.append([
            evaluate(train_alone(cell.init, shard, config, cell.fold, cell.run, client_id),
                     cell.test, config.model)
            for client_id, shard in enumerate(cell.clients)
        ])
    return out


@dataclass
class SweepCell:
    hidden_units: int
    strategy: str
    federated: dict[str, float] | None
    centralized: dict[str, float] | None
    improvement: dict[str, float] | None
    relative_improvement: dict[str, float] | None = None
    result_file: str | None = None
    ledger_files: list[str] = field(default_factory=list)
    error: str | None = None


@dataclass
class SweepResult:
    dataset: str
    cells: list[SweepCell]
    results: dict[tuple[int, str], ExperimentResult] = field(default_factory=dict, repr=False)

    @property
    def strategies(self) -> list[str]:
        return list(dict.fromkeys(c.strategy for c in self.cells))

    def _mean_of(self, attr: str) -> dict[str, dict[str, float]]:
        out = {}
        for strategy in self.strategies:
            ok = [getattr(c, attr) for c in self.cells if c.strategy == strategy and getattr(c, attr)]
            if ok:
                out[strategy] = {m: float(np.mean([imp[m] for imp in ok])) for m in METRIC_NAMES}
        return out

    @property
    def mean_improvement(self) -> dict[str, dict[str, float]]:
        """Per-strategy percentage-point deltas averaged across successful cells."""
        return self._mean_of("improvement")

    @property
    def mean_relative_improvement(self) -> dict[str, dict[str, float]]:
        """Per-strategy relative gains (percent of baseline) averaged across successful cells."""
        return self._mean_of("relative_improvement")

    def table_rows(self) -> list[dict]:
        rows = []
        for h in dict.fromkeys(c.hidden_units for c in self.cells):
            cells = [c for c in self.cells if c.hidden_units == h]
            rows.append({
                "dataset": self.dataset,
                "hidden_units": h,
                "centralized": next((c.centralized for c in cells if c.centralized), None),
                "federated": {c.strategy: c.federated for c in cells if c.federated},
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "mode": "sweep",
            "dataset": self.dataset,
            "strategies": self.strategies,
            "cells": [vars(c) for c in self.cells],
            "rows": self.table_rows(),
            "mean_improvement": self.mean_improvement,
            "mean_relative_improvement": self.mean_relative_improvement,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def run_sweep(base: ExperimentConfig, hidden_units: Sequence[int] | None = None,
              strategies: Sequence[str] | None = None, out_dir: str | Path | None = None,
              dataset: WindowedDataset | None = None) -> SweepResult:
    """Every hidden-unit x strategy cell plus one centralized baseline per hidden size.

    The baseline does not depend on the strategy, so it runs once per hidden size
    and is shared by that row's cells. Failures are recorded and the sweep goes on.
    """
    hidden_units = list(hidden_units or base.sweep.hidden_units)
    strategies = [StrategyKind.parse(s).value for s in (strategies or base.sweep.strategies)]
    if not hidden_units or not strategies:
        raise ValueError("sweep needs at least one hidden size and one strategy")
    sweep = SweepResult(base.dataset.name, [])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for h in hidden_units:
        cent_cfg = base.replace(**{"model.hidden_units": h})
        try:
            central = run_centralized(cent_cfg, dataset)
            central_mean, central_err = central.mean, None
            sweep.results[(h, "Centralized")] = central
            if out_dir is not None:
                central.write(Path(out_dir) / result_filename(cent_cfg, "centralized"))
        except Exception as exc:
            log.exception("centralized baseline for hidden=%d failed", h)
            central_mean, central_err = None, f"centralized: {exc}"
        for strategy in strategies:
            cfg = base.replace(**{"model.hidden_units": h, "strategy.kind": strategy})
            cell = SweepCell(h, strategy, None, central_mean, None, error=central_err)
            try:
                fed = run_federated(cfg, out_dir, dataset)
                sweep.results[(h, strategy)] = fed
                cell.federated = fed.mean
                cell.ledger_files = [c.ledger_path for c in fed.cells if c.ledger_path]
                if out_dir is not None:
                    cell.result_file = result_filename(cfg, "federated")
                    fed.write(Path(out_dir) / cell.result_file)
                if central_mean is not None:
                    cell.improvement = improvement_table(central_mean, {strategy: fed.mean})[strategy]
                    cell.relative_improvement = improvement_table(
                        central_mean, {strategy: fed.mean}, mode="relative")[strategy]
            except Exception as exc:
                log.exception("sweep cell hidden=%d strategy=%s failed", h, strategy)
                cell.error = str(exc)
            sweep.cells.append(cell)
    return sweep
