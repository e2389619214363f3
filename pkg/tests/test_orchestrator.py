import hashlib
import json

import numpy as np
import pytest

from conftest import make_tiny_experiment
from fedledger.aggregation import ServerState, StrategyConfig
from fedledger.config import ConfigError, ExperimentConfig, load_config, protocol_config
from fedledger.data import WindowedDataset
from fedledger.ledger import Ledger, verify_chain, verify_file
from fedledger.metrics import improvement_table
from fedledger.model import ModelConfig, TrainConfig, evaluate, init_glorot, local_train
from fedledger.orchestrator import (derive_seed, ledger_filename, result_filename,
                                    run_centralized, run_federated, run_round, run_sweep)
from fedledger.params import digest


def shards(config: ModelConfig, sizes, seed=0):
    rng = np.random.default_rng(seed)
    return [WindowedDataset(rng.normal(size=(n, config.in_channels, config.window_len)),
                            rng.integers(0, config.num_classes, size=n), config.window_len, 1,
                            config.num_classes) for n in sizes]


def fresh(config, seed=0):
    init = init_glorot(config, seed)
    ledger = Ledger()
    ledger.genesis(init, "FedAvg")
    return ServerState(init), ledger


def test_derive_seed_formula():
    expected = int.from_bytes(hashlib.sha256(b"7/train/1/0/2/3").digest()[-8:], "big")
    assert derive_seed(7, "train", 1, 0, 2, 3) == expected
    assert derive_seed(7, "a") != derive_seed(8, "a")
    assert 0 <= derive_seed(0) < 2**64


def test_single_client_round_commits_its_params(tiny_model):
    state, ledger = fresh(tiny_model)
    clients = shards(tiny_model, [9])
    train = TrainConfig(learning_rate=1e-2, batch_size=4)
    outcome = run_round(state, clients, tiny_model, train, StrategyConfig(), ledger,
                        seed_for=lambda c, r: 11)
    solo = local_train(state.global_params, clients[0], tiny_model,
                       TrainConfig(learning_rate=1e-2, batch_size=4, seed=11))
    assert outcome.committed and outcome.state.round == 1
    assert outcome.state.global_params == solo.params
    assert len(ledger) == 2
    assert ledger.head.params_digest == digest(outcome.state.global_params)


def test_trainer_sees_only_its_own_shard(tiny_model):
    state, ledger = fresh(tiny_model)
    clients = shards(tiny_model, [5, 6, 7])
    seen = []

    def spy(params, shard, model_config, train_config, client_id, round):
        seen.append((client_id, id(shard)))
        return local_train(params, shard, model_config, train_config, client_id, round)

    for _ in range(2):
        state = run_round(state, clients, tiny_model, TrainConfig(), StrategyConfig(), ledger,
                          trainer=spy).state
    assert len(seen) == 6
    assert all(shard_id == id(clients[cid]) for cid, shard_id in seen)


def test_fedprox_receives_mu_and_anchor(tiny_model):
    captured = []

    def spy(params, shard, model_config, train_config, client_id, round):
        captured.append(train_config.prox_mu)
        return local_train(params, shard, model_config, train_config, client_id, round)

    state, ledger = fresh(tiny_model)
    run_round(state, shards(tiny_model, [4, 4, 4]), tiny_model, TrainConfig(),
              StrategyConfig("FedProx", prox_mu=0.3), ledger, trainer=spy)
    assert captured == [0.3, 0.3, 0.3]


def test_tampered_round_is_retried_then_reported(tiny_model):
    state, ledger = fresh(tiny_model)
    calls = []

    def tamper(p):
        calls.append(1)
        return p.map(lambda a: a + 1e-6)

    outcome = run_round(state, shards(tiny_model, [4, 4, 4]), tiny_model, TrainConfig(),
                        StrategyConfig(), ledger, tamper=tamper)
    assert not outcome.committed
    assert outcome.state is state
    assert len(calls) == 2
    assert len(ledger) == 1
    assert "required endorsements" in outcome.reason


def test_run_federated_ledgers_and_determinism(tmp_path, tiny_experiment):
    a = run_federated(tiny_experiment, tmp_path / "a")
    (tmp_path / "b").mkdir()
    b = run_federated(tiny_experiment, tmp_path / "b")
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert len(a.cells) == tiny_experiment.folds * tiny_experiment.runs
    for cell in a.cells:
        assert cell.committed_rounds == tiny_experiment.rounds and not cell.failed_rounds
        path = tmp_path / "a" / cell.ledger_path
        assert path.read_bytes() == (tmp_path / "b" / cell.ledger_path).read_bytes()
        report = verify_file(path)
        assert report.valid and report.length == tiny_experiment.rounds + 1
        ledger = a.ledgers[(cell.fold, cell.run)]
        assert ledger.head.params_digest.hex() == cell.final_digest


def test_result_mean_is_runs_then_folds(tiny_experiment):
    result = run_federated(tiny_experiment.replace(runs=2, rounds=1))
    for name in ("precision", "recall", "f1"):
        per_fold = []
        for fold in (0, 1):
            vals = [c.metrics.macro[name] for c in result.cells if c.fold == fold]
            per_fold.append(sum(vals) / len(vals))
        assert result.mean[name] == pytest.approx(sum(per_fold) / 2, abs=1e-12)


def test_zero_rounds_evaluates_initial_model(tiny_experiment):
    cfg = tiny_experiment.replace(rounds=0)
    fed = run_federated(cfg)
    cen = run_centralized(cfg)
    assert [c.metrics.confusion.tolist() for c in fed.cells] == [c.metrics.confusion.tolist() for c in cen.cells]
    for cell in fed.cells:
        assert fed.final_params[(cell.fold, cell.run)] == init_glorot(
            cfg.model, derive_seed(cfg.experiment_seed, "init", cell.fold, cell.run))
        assert len(fed.ledgers[(cell.fold, cell.run)]) == 1


def test_centralized_is_deterministic(tiny_experiment):
    assert run_centralized(tiny_experiment).to_dict() == run_centralized(tiny_experiment).to_dict()


def test_tampering_server_commits_nothing(tiny_experiment):
    result = run_federated(tiny_experiment, tamper=lambda p: p.map(lambda a: a * 1.0001))
    for cell in result.cells:
        assert cell.committed_rounds == 0
        assert cell.failed_rounds == [1, 2]
        assert verify_chain(result.ledgers[(cell.fold, cell.run)].blocks).valid


def test_sweep_arithmetic_and_bookkeeping(tmp_path, tiny_experiment):
    sweep = run_sweep(tiny_experiment.replace(rounds=1), [4, 5], ["FedAvg", "Krum"], tmp_path)
    assert [(c.hidden_units, c.strategy) for c in sweep.cells] == [
        (4, "FedAvg"), (4, "Krum"), (5, "FedAvg"), (5, "Krum")]
    for cell in sweep.cells:
        assert cell.error is None
        fed = sweep.results[(cell.hidden_units, cell.strategy)]
        cen = sweep.results[(cell.hidden_units, "Centralized")]
        assert cell.improvement == improvement_table(cen.mean, {"s": fed.mean})["s"]
        assert len(cell.ledger_files) == len(fed.cells)
        assert all((tmp_path / f).exists() for f in cell.ledger_files)
        assert (tmp_path / cell.result_file).exists()
    for strategy in ("FedAvg", "Krum"):
        cells = [c for c in sweep.cells if c.strategy == strategy]
        for name in ("precision", "recall", "f1"):
            hand = (cells[0].improvement[name] + cells[1].improvement[name]) / 2
            assert sweep.mean_improvement[strategy][name] == pytest.approx(hand, abs=1e-12)
            rel = (cells[0].relative_improvement[name] + cells[1].relative_improvement[name]) / 2
            assert sweep.mean_relative_improvement[strategy][name] == pytest.approx(rel, abs=1e-12)


def test_sweep_records_failures_and_continues(tiny_experiment):
    # Krum needs at least three clients when f = 1
    cfg = tiny_experiment.replace(rounds=1, num_clients=3, **{"strategy.krum_f": 1})
    sweep = run_sweep(cfg, [4], ["Krum", "FedAvg"])
    krum, avg = sweep.cells
    assert krum.error and "Krum" in krum.error and krum.federated is None
    assert avg.error is None and avg.improvement is not None
    assert "Krum" not in sweep.mean_improvement


def test_one_by_one_sweep_reduces_to_single_runs(tiny_experiment):
    cfg = tiny_experiment.replace(rounds=1)
    sweep = run_sweep(cfg, [4], ["FedAvg"])
    assert sweep.cells[0].federated == run_federated(cfg).mean
    assert sweep.cells[0].centralized == run_centralized(cfg).mean


def test_filenames():
    cfg = make_tiny_experiment(**{"strategy.kind": "FedTrimmedAvg", "experiment_seed": 9})
    assert result_filename(cfg, "federated") == "result_fedtrimmedavg_h4_s9.json"
    assert result_filename(cfg, "centralized") == "result_centralized_h4_s9.json"
    assert ledger_filename(cfg, 1, 2) == "ledger_fedtrimmedavg_h4_s9_f1_r2.jsonl"


def test_config_loading(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"rounds": 3, "model": {"hidden_units": 16}}))
    cfg = load_config(path, ["strategy.kind=Krum", "train.learning_rate=0.01"], seed=4)
    assert (cfg.rounds, cfg.model.hidden_units, cfg.strategy.kind.value) == (3, 16, "Krum")
    assert cfg.train.learning_rate == 0.01 and cfg.experiment_seed == 4
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError, match="model.depth"):
        load_config(None, ["model.depth=3"])
    path.write_text(json.dumps({"modle": {}}))
    with pytest.raises(ConfigError, match="modle"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(None, ["folds=1"])


def test_protocol_preset():
    cfg = protocol_config(50, 256)
    assert (cfg.num_clients, cfg.folds, cfg.runs) == (3, 5, 5)
    assert (cfg.model.window_len, cfg.model.filter_size, cfg.model.hidden_units) == (50, 11, 256)
    assert cfg.train.learning_rate == 1e-4 and cfg.train.weight_decay == 1e-6
    fast = protocol_config(100)
    assert (fast.model.window_len, fast.model.filter_size) == (100, 21)
