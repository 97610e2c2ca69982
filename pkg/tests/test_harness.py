import csv
import json
import socket
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from fedacross.cli import main
from fedacross.data import Dataset
from fedacross.errors import ConfigError
from fedacross.harness import (compare_strategies, dump_config, export_embeddings, parse_config, prepare_run,
                               run_clients, run_experiment, sweep_k)
from conftest import SMALL_RUN


# configuration

def test_defaults_follow_the_reference_settings():
    cfg = parse_config("")
    assert (cfg.server_lr, cfg.client_lr, cfg.momentum, cfg.weight_decay) == (0.01, 0.1, 0.9, 1e-3)
    assert (cfg.server_batch, cfg.client_batch, cfg.client_epochs) == (128, 32, 200)
    assert cfg.k_values == (0, 3, 5, 10) and cfg.repetitions == 5 and cfg.server_epochs <= 300


def test_dump_and_parse_round_trip(small_cfg):
    assert parse_config(dump_config(small_cfg)) == small_cfg


def test_overrides_and_aliases(small_cfg):
    cfg = parse_config(SMALL_RUN, ["client.lr=0.5", "experiment.strategy=differential_sync", "client.1.seed=99"])
    assert cfg.client_lr == 0.5 and cfg.strategy == "differential_sync" and cfg.targets[1].seed == 99


def test_validation_lists_every_bad_key():
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nstrategy = smoke_signals\nk = -1\nrepetitions = 0\n[model]\ncolour = 3\n")
    msg = str(err.value)
    assert "model.colour" in msg
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nstrategy = smoke_signals\nk = -1\nrepetitions = 0\n")
    for key in ("experiment.strategy", "experiment.k", "experiment.repetitions"):
        assert key in str(err.value)


def test_bad_override_and_bad_values():
    with pytest.raises(ConfigError):
        parse_config("", ["nodot=1"])
    with pytest.raises(ConfigError, match="server.lr"):
        parse_config("[server]\nlr = fast\n")
    with pytest.raises(ConfigError, match="class_subset"):
        parse_config("[experiment]\nclass_subset = 11\n")


# experiments

def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timings.json"}


def test_runs_are_reproducible(tmp_path, small_cfg):
    run_experiment(small_cfg, tmp_path / "a")
    run_experiment(small_cfg, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"metrics.csv", "summary.json", "server_loss.csv"}
    assert a == b


def test_parallel_workers_give_the_same_files(tmp_path, small_cfg):
    run_experiment(small_cfg, tmp_path / "a")
    run_experiment(small_cfg, tmp_path / "b", workers=2)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_zero_shot_run_trains_nothing_on_clients(tmp_path, small_cfg):
    cfg = replace(small_cfg, repetitions=1, k=0)
    m = run_experiment(cfg, tmp_path)
    assert all(r["labels_requested"] == 0 for r in m.rows)
    assert all(r["version"] == 1 for r in m.rows)
    assert all(r["accuracy"] == r["zero_shot_accuracy"] for r in m.rows)


def test_summary_shape(tmp_path, small_cfg):
    m = run_experiment(small_cfg, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [c["client"] for c in summary["clients"]] == ["client-0", "client-1"]
    for c in summary["clients"]:
        assert 0 <= c["accuracy_mean"] <= 1 and c["accuracy_std"] >= 0 and c["runs"] == 2
    assert len(m.rows) == 4 and set(m.loss_curves) == {0, 1}


def test_sampler_telemetry_file(tmp_path, small_cfg):
    cfg = replace(small_cfg, repetitions=1, sampling_enabled=True)
    run_experiment(cfg, tmp_path)
    with open(tmp_path / "sampler_telemetry.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {"t", "selected", "q_t", "p_t", "keep"} <= set(rows[0])


def test_sweep_has_one_row_per_k(tmp_path, small_cfg):
    table = sweep_k(small_cfg, tmp_path)
    assert [r["k"] for r in table] == [0, 3]
    with open(tmp_path / "sweep_k.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["k"] for r in rows] == ["0", "3"]
    assert {"accuracy_mean", "accuracy_std"} <= set(rows[0])


def test_strategy_comparison(tmp_path, small_cfg):
    report = compare_strategies(small_cfg, tmp_path, rounds=2)
    s = report["strategies"]
    first = {k: v["first_contact_bytes"] for k, v in s.items()}
    assert first["pre_configured"] < first["differential_sync"] < first["on_demand"]
    assert report["identical_first_round_accuracy"]
    second = {k: v["rounds"][1]["param_bytes"] for k, v in s.items()}
    assert second["pre_configured"] < second["differential_sync"] < second["on_demand"]
    assert (tmp_path / "strategies.json").exists()


def test_socket_transport_reproduces_in_process_rows(small_cfg):
    cfg = replace(small_cfg, repetitions=1)
    prepared = prepare_run(cfg, 0)
    assert run_clients(cfg, prepared) == run_clients(cfg, prepared, transport="socket")


# embedding export

def test_export_embeddings(tmp_path, world):
    empty = Dataset(np.zeros((0, 8, 8)), np.zeros(0), 4)
    export_embeddings(world.params, empty, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join([f"e{i}" for i in range(8)] + ["label", "stage"]) + "\n"

    test = world.targets[0][1]
    export_embeddings(world.params, test, tmp_path / "a.csv", "fine-tuned")
    export_embeddings(world.params, test, tmp_path / "b.csv", "fine-tuned")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == len(test) + 1 and lines[1].endswith(",fine-tuned")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_export_to_unwritable_path(world):
    with pytest.raises(OSError):
        export_embeddings(world.params, world.targets[0][1], "/nonexistent/dir/e.csv")


# command line

@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_RUN)
    return path


def test_cli_simulate_and_sweep(tmp_path, cfg_file, capsys):
    assert main(["simulate", "--config", str(cfg_file), "--out", str(tmp_path / "sim")]) == 0
    assert (tmp_path / "sim" / "metrics.csv").exists()
    assert main(["sweep-k", "--config", str(cfg_file), "--set", "experiment.repetitions=1",
                 "--out", str(tmp_path / "sweep")]) == 0
    assert "k= 3" in capsys.readouterr().out


def test_cli_compare_and_export(tmp_path, cfg_file, capsys):
    assert main(["compare-strategies", "--config", str(cfg_file), "--rounds", "1", "--out", str(tmp_path / "c")]) == 0
    assert "identical first-round accuracy: True" in capsys.readouterr().out
    assert main(["export-embeddings", "--config", str(cfg_file), "--out", str(tmp_path / "emb")]) == 0
    names = sorted(p.name for p in (tmp_path / "emb").iterdir())
    assert names == ["embeddings_baseline.csv", "embeddings_fine-tuned.csv", "embeddings_pretrained.csv"]


def test_cli_exit_codes(tmp_path, cfg_file, capsys):
    assert main(["simulate", "--config", str(cfg_file), "--set", "experiment.strategy=nope"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["simulate", "--config", str(cfg_file), "--set", "experiment.k=50",
                 "--set", "experiment.repetitions=1", "--out", str(tmp_path / "x")]) == 0
    assert main(["client", "--config", str(cfg_file), "--port", "1", "--wait", "0"]) == 5
    assert main(["show-config", "--config", str(cfg_file)]) == 0
    assert "[client.1]" in capsys.readouterr().out


def test_cli_pretrain_writes_model(tmp_path, cfg_file):
    assert main(["pretrain", "--config", str(cfg_file), "--out", str(tmp_path / "m")]) == 0
    written = {p.name for p in (tmp_path / "m").iterdir()}
    assert {"model.famp", "source_prototypes.bin", "server_loss.csv"} <= written


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_server_and_clients_as_separate_processes(tmp_path, cfg_file):
    port = str(_free_port())
    common = ["--config", str(cfg_file), "--set", f"experiment.port={port}", "--set", "experiment.rounds=2"]
    assert main(["pretrain", *common, "--out", str(tmp_path / "m")]) == 0
    run = [sys.executable, "-m", "fedacross"]
    server = subprocess.Popen(run + ["serve", *common, "--model", str(tmp_path / "m"), "--clients", "2",
                                     "--round-timeout", "120", "--out", str(tmp_path / "agg")],
                              stdout=subprocess.PIPE, text=True)
    try:
        assert "serving on" in server.stdout.readline()
        clients = [subprocess.Popen(run + ["client", *common, "--index", str(i), "--out", str(tmp_path / f"c{i}.json")])
                   for i in range(2)]
        assert [c.wait(timeout=300) for c in clients] == [0, 0]
        assert server.wait(timeout=120) == 0
        log = server.stdout.read()
    finally:
        if server.poll() is None:
            server.kill()
    assert "round 0: 2 uploads, version 2" in log and "round 1: 2 uploads, version 3" in log
    for i in range(2):
        rounds = json.loads((tmp_path / f"c{i}.json").read_text())
        assert len(rounds) == 2 and all(0 <= r["accuracy"] <= 1 for r in rounds)
    assert (tmp_path / "agg" / "model.famp").exists()
