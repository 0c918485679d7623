import json
import subprocess
import sys
import textwrap

import pytest

from kfcsim.cli import (
    CSV_HEADER,
    emit_round_csv,
    load_experiment_file,
    read_round_csv,
    run_cli,
)
from kfcsim.errors import ConfigError
from kfcsim.sim import accuracy_10

CONFIG = textwrap.dedent(
    """\
    schema_version: 1
    output_dir: unused
    master_seed: 3
    architectures: [pofl, kfc]
    defaults:
      n_clients: 12
      n_pools: 3
      clients_per_round: 4
      rounds: 5
      train: {epochs: 2, learning_rate: 0.5, batch_size: 10}
      data: {source: synthetic, k: 3, p: 16, n_per_class: 60, spread: 0.25}
    experiments:
      - name: flip
        scenario: B
        attack: {kind: byzantine-flip, boost: true}
      - name: backdoor
        scenario: A
        attack:
          kind: backdoor
          pattern: {shape: cross, target_label: 0}
        architectures: [client-server, pofl]
    """
)


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(CONFIG)
    return p


def test_one_experiment_writes_two_files(config_path, tmp_path):
    out = tmp_path / "out"
    code = run_cli(["--config", str(config_path), "--out", str(out), "--experiments", "flip"])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["flip.csv", "flip.summary.json"]


def test_unknown_experiment_exit_2(config_path, tmp_path):
    code = run_cli(["--config", str(config_path), "--out", str(tmp_path), "--experiments", "nope"])
    assert code == 2


def test_missing_or_bad_config_exit_2(tmp_path, capsys):
    assert run_cli(["--config", str(tmp_path / "absent.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 9\nexperiments: [{name: x}]\n")
    assert run_cli(["--config", str(bad)]) == 2
    assert "schema_version" in capsys.readouterr().err
    assert run_cli([]) == 2


def test_config_errors():
    with pytest.raises(ConfigError):
        load_experiment_file("/nonexistent.yaml")


@pytest.mark.parametrize(
    "patch",
    [
        "experiments: [{name: a}, {name: a}]",
        "experiments: [{name: a, architectures: [raft]}]",
        "experiments: [{name: a, bogus_key: 1}]",
        "experiments: [{name: a, scenario: B}]",
        "experiments: [{name: a, data: {source: csv, path: /no/such.csv}}]",
    ],
)
def test_invalid_experiments_rejected(tmp_path, patch):
    p = tmp_path / "c.yaml"
    p.write_text("schema_version: 1\n" + patch + "\n")
    with pytest.raises(ConfigError):
        load_experiment_file(p)


def test_seed_flag_is_deterministic(config_path, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        assert run_cli(["--config", str(config_path), "--out", str(out), "--seed", "11"]) == 0
        outs.append(out)
    for name in ("flip.csv", "backdoor.csv", "flip.summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    other = tmp_path / "other"
    run_cli(["--config", str(config_path), "--out", str(other), "--seed", "12"])
    assert (other / "flip.csv").read_bytes() != (outs[0] / "flip.csv").read_bytes()


def test_thread_count_does_not_change_output(config_path, tmp_path, monkeypatch):
    blobs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("KFC_SIM_THREADS", threads)
        out = tmp_path / threads
        assert run_cli(["--config", str(config_path), "--out", str(out)]) == 0
        blobs.append((out / "backdoor.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_csv_schema_and_contents(config_path, tmp_path):
    out = tmp_path / "o"
    run_cli(["--config", str(config_path), "--out", str(out)])
    text = (out / "flip.csv").read_text(encoding="utf-8")
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 2 * 5  # two architectures, five rounds each
    assert all(line == line.rstrip() for line in lines)
    rows = read_round_csv(out / "flip.csv")
    assert all(r["backdoor_acc"] is None for r in rows)
    assert all(line.split(",")[3] == "" for line in lines[1:])
    bd = read_round_csv(out / "backdoor.csv")
    assert all(r["backdoor_acc"] is not None for r in bd)
    assert [r["winner_miner"] for r in bd if r["architecture"] == "client-server"] == [None] * 5


def test_emit_five_rounds_and_roundtrip(tmp_path):
    from kfcsim.sim import DataSpec, SimConfig, run_simulation

    series = run_simulation(
        SimConfig(n_clients=6, n_pools=2, rounds=5, data=DataSpec(n_per_class=60), master_seed=2)
    )
    path = tmp_path / "s.csv"
    emit_round_csv(series, path)
    rows = read_round_csv(path)
    assert len(rows) == 5
    for t, (row, r) in enumerate(zip(rows, series.rounds), start=1):
        assert row["round"] == r.round == t
        assert row["original_acc"] == r.original_acc
        assert row["validation_acc"] == r.validation_acc
        assert row["winner_miner"] == r.winner_miner
        window = series.original()[max(0, t - 10) : t]
        assert row["acc10_running"] == sum(window) / len(window)


def test_acc10_running_uses_ten_round_window(tmp_path):
    from kfcsim.sim import MetricsSeries, RoundMetrics

    vals = [i / 20 for i in range(15)]
    series = MetricsSeries(
        "pofl", [RoundMetrics(t + 1, 0, (), v, None, v) for t, v in enumerate(vals)]
    )
    path = tmp_path / "w.csv"
    emit_round_csv(series, path)
    rows = read_round_csv(path)
    assert rows[14]["acc10_running"] == accuracy_10(vals[5:15])
    assert rows[2]["acc10_running"] == accuracy_10(vals[:3])


def test_summary_accuracy10_is_bit_exact(config_path, tmp_path):
    out = tmp_path / "o"
    run_cli(["--config", str(config_path), "--out", str(out), "--experiments", "backdoor"])
    doc = json.loads((out / "backdoor.summary.json").read_text())
    rows = read_round_csv(out / "backdoor.csv")
    for arch, summ in doc["architectures"].items():
        orig = [r["original_acc"] for r in rows if r["architecture"] == arch]
        bd = [r["backdoor_acc"] for r in rows if r["architecture"] == arch]
        assert summ["original"]["accuracy_10"] == accuracy_10(orig)
        assert summ["original"]["accuracy"] == orig[-1]
        assert summ["backdoor"]["accuracy_10"] == accuracy_10(bd)
    assert doc["schema_version"] == 1 and doc["experiment"] == "backdoor"


def test_module_entry_point(config_path, tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run(
        [sys.executable, "-m", "kfcsim", "--config", str(config_path), "--out", str(out),
         "--experiments", "flip"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "flip.csv").exists()
