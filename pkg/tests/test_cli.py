import json

import pytest

from conftest import make_tiny_experiment
from fedledger.cli import main
from fedledger.orchestrator import run_federated


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(make_tiny_experiment(rounds=1).to_dict()))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_result_and_ledgers(tmp_path, capsys, config_file):
    code, out, err = run_cli(capsys, "run", "--config", config_file, "--out", tmp_path / "o")
    assert code == 0, err
    result = tmp_path / "o" / "result_fedavg_h4_s0.json"
    assert result.exists()
    obj = json.loads(result.read_text())
    assert obj["mode"] == "federated" and len(obj["cells"]) == 2
    for cell in obj["cells"]:
        code, out, _ = run_cli(capsys, "verify-ledger", tmp_path / "o" / cell["ledger_path"])
        assert code == 0 and out.strip() == "valid, 2 blocks"


def test_cli_matches_library(tmp_path, capsys, config_file):
    assert run_cli(capsys, "run", "--config", config_file, "--out", tmp_path)[0] == 0
    library = run_federated(make_tiny_experiment(rounds=1))
    on_disk = json.loads((tmp_path / "result_fedavg_h4_s0.json").read_text())
    for cell in on_disk["cells"]:
        assert cell.pop("ledger_path").endswith(".jsonl")
    expected = json.loads(json.dumps(library.to_dict()))
    for cell in expected["cells"]:
        assert cell.pop("ledger_path") is None
    assert on_disk == expected


def test_verify_ledger_flags_flipped_byte(tmp_path, capsys, config_file):
    run_cli(capsys, "run", "--config", config_file, "--out", tmp_path, "--set", "rounds=3")
    path = tmp_path / "ledger_fedavg_h4_s0_f0_r0.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[2])
    digest = obj["params_digest"]
    obj["params_digest"] = ("1" if digest[0] != "1" else "2") + digest[1:]
    lines[2] = json.dumps(obj, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    code, out, err = run_cli(capsys, "verify-ledger", path)
    assert code == 3
    assert out.strip() == "first bad index: 2"
    assert err.startswith("error:") and "hash mismatch" in err


def test_render_table_round_trip(tmp_path, capsys, config_file):
    run_cli(capsys, "run", "--config", config_file, "--out", tmp_path)
    result = tmp_path / "result_fedavg_h4_s0.json"
    code, out, _ = run_cli(capsys, "render-table", result, "--out", tmp_path / "tables")
    assert code == 0
    text = (tmp_path / "tables" / "table_result_fedavg_h4_s0.txt").read_text()
    mean = json.loads(result.read_text())["mean"]
    rows = text.splitlines()[2:]
    assert rows[0].split()[-1] == f"{100 * mean['precision']:.2f}%"
    assert rows[1].split()[-1] == f"{100 * mean['recall']:.2f}%"
    assert rows[2].split()[-1] == f"{100 * mean['f1']:.2f}%"


def test_baseline_and_seed_flag(tmp_path, capsys, config_file):
    code, _, err = run_cli(capsys, "baseline", "--config", config_file, "--out", tmp_path, "--seed", "3")
    assert code == 0, err
    assert (tmp_path / "result_centralized_h4_s3.json").exists()


def test_sweep_command(tmp_path, capsys, config_file):
    code, out, err = run_cli(capsys, "sweep", "--config", config_file, "--out", tmp_path,
                             "--set", "sweep.hidden_units=[4]", "--set", 'sweep.strategies=["FedAvg","FedAvgM"]')
    assert code == 0, err
    assert "Mean improvement over centralized" in out
    sweep = json.loads((tmp_path / "sweep_synthetic_s0.json").read_text())
    assert sweep["strategies"] == ["FedAvg", "FedAvgM"]
    code, out, _ = run_cli(capsys, "render-table", tmp_path / "sweep_synthetic_s0.json", "--out", tmp_path)
    assert code == 0 and "FedAvgM" in out


def test_gen_data(tmp_path, capsys, config_file):
    code, out, _ = run_cli(capsys, "gen-data", "--config", config_file, "--out", tmp_path)
    assert code == 0
    written = tmp_path / "synthetic_k3_r20_s0.csv"
    assert written.read_text().splitlines()[0] == "t,x,y,z,label"
    assert len(written.read_text().splitlines()) == 1 + 3 * 120


def test_csv_dataset_config(tmp_path, capsys, config_file):
    run_cli(capsys, "gen-data", "--config", config_file, "--out", tmp_path)
    code, _, err = run_cli(capsys, "run", "--config", config_file, "--out", tmp_path / "csv",
                           "--set", "dataset.kind=csv",
                           "--set", f"dataset.csv_path={tmp_path / 'synthetic_k3_r20_s0.csv'}")
    assert code == 0, err


def test_exit_codes_for_bad_input(tmp_path, capsys, config_file):
    code, _, err = run_cli(capsys, "run", "--config", config_file, "--set", "model.depth=2")
    assert code == 1 and err.startswith("error:") and "model.depth" in err
    assert run_cli(capsys, "launch")[0] == 1
    assert run_cli(capsys, "run", "--config", tmp_path / "missing.json")[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run_cli(capsys, "run", "--config", bad)[0] == 1
    code, _, err = run_cli(capsys, "run", "--config", config_file, "--out", tmp_path,
                           "--set", "dataset.kind=csv", "--set", "dataset.csv_path=/nonexistent.csv")
    assert code == 2 and err.startswith("error:")
    assert run_cli(capsys, "verify-ledger", tmp_path / "none.jsonl")[0] == 2
    junk = tmp_path / "junk.json"
    junk.write_text("{}")
    assert run_cli(capsys, "render-table", junk)[0] == 1
