import json

import pytest

from bench.dataset import MANIFEST_NAME, entry_path
from bench.sweep import SCHEMA, Cell, CellStatus, SweepRecord
from bench.units import KIB
from cli.application import WanBenchApp, dispatch
from config import config
from wan import emulation
from wan.models import Integrity, TransferResult


def wanbench(*argv):
    return WanBenchApp().run([str(a) for a in argv])


def test_bdp_calculator(capsys):
    assert wanbench("calc", "bdp", "--bw", "1Gbps", "--rtt", "100ms") == 0
    assert capsys.readouterr().out == "12500000 bytes\n"


def test_volume_and_time_calculators(capsys):
    assert wanbench("calc", "volume", "--bw", "100Gbps") == 0
    assert wanbench("calc", "time", "--volume", "4.8PB", "--bw", "100Gbps") == 0
    assert capsys.readouterr().out.splitlines() == ["1080 TB/day (rounded 1000 TB)", "384000 s"]


def test_latency_class(capsys):
    assert wanbench("calc", "latency-class", "--one-way", "37ms") == 0
    assert capsys.readouterr().out == "interstate\n"


def test_no_arguments_prints_usage(capsys):
    assert dispatch([]) == 2
    assert "usage: wanbench" in capsys.readouterr().err


def test_help_lists_every_command(capsys):
    assert wanbench("--help") == 0
    out = capsys.readouterr().out
    for command in ("calc", "dataset", "serve", "transfer", "stream", "stage", "probe",
                    "emu", "tune", "sweep", "report", "config"):
        assert command in out


def test_bad_unit_is_a_usage_error(capsys):
    assert wanbench("calc", "bdp", "--bw", "fast", "--rtt", "1ms") == 2
    assert "fast" in capsys.readouterr().err


def test_missing_peer_is_reported_by_command(capsys):
    assert wanbench("transfer", "--synthetic", "4KiB", "--count", "1") == 1
    assert "error: 'transfer' needs a peer address" in capsys.readouterr().err


def test_dataset_dry_run_writes_nothing(tmp_path, capsys):
    assert wanbench("dataset", "gen", "--size", "4KiB", "--count", "3", "--root", tmp_path / "d", "--dry-run") == 0
    assert capsys.readouterr().out.startswith("3 files x 4KiB = 12KiB")
    assert not (tmp_path / "d").exists()


def test_dataset_generate_then_verify(tmp_path, capsys):
    root = tmp_path / "d"
    assert wanbench("dataset", "gen", "--size", "4KiB", "--count", "3", "--root", root) == 0
    assert (root / MANIFEST_NAME).exists()
    assert wanbench("dataset", "verify", "--root", root) == 0

    (root / entry_path(1)).write_bytes(b"\0" * 4096)
    capsys.readouterr()
    assert wanbench("dataset", "verify", "--root", root) == 1
    out = capsys.readouterr().out
    assert "1 digest mismatches" in out
    assert f"digest\t{entry_path(1)}" in out


def test_series_listing(capsys):
    assert wanbench("dataset", "series", "--min", "1KiB", "--max", "4KiB", "--budget", "16KiB") == 0
    assert capsys.readouterr().out.splitlines() == [
        "size\tcount\ttotal",
        "1KiB\t16\t16KiB",
        "2KiB\t8\t16KiB",
        "4KiB\t4\t16KiB",
    ]


def test_sweep_dry_run_lists_cells(tmp_path, capsys):
    code = wanbench(
        "sweep", "run", "--dry-run", "--synthetic", "--no-emulation",
        "--min", "1KiB", "--max", "4KiB", "--budget", "16KiB",
        "--latencies", "5ms,37ms", "--ccas", "cubic", "--iterations", "1",
        "--work-dir", tmp_path / "work", "--log", tmp_path / "sweep.jsonl",
    )
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "latency_us\tcca\tmode\titeration\tsize"
    assert lines[1] == "5000\tcubic\tbulk\t1\t1024"
    assert lines[-1].startswith("6 cells")
    assert not (tmp_path / "sweep.jsonl").exists()


def test_emulation_dry_run_prints_tc(monkeypatch, capsys):
    monkeypatch.setattr(emulation.psutil, "net_if_addrs", lambda: {"lo": [], "eth1": []})
    assert wanbench("emu", "apply", "--delay", "37ms", "--interface", "eth1", "--dry-run") == 0
    out = capsys.readouterr().out
    assert out.startswith("tc qdisc replace dev eth1 root netem limit ")
    assert "delay 37000us" in out


def test_emulation_dry_run_clear_leaves_no_state_behind(capsys):
    assert wanbench("emu", "clear", "--all", "--dry-run") == 0
    assert wanbench("emu", "clear", "--interface", "lo", "--dry-run") == 0
    assert capsys.readouterr().out == "tc qdisc del dev lo root\n"
    assert not config.data_home.exists()


def test_tune_audit_of_an_empty_proc_tree(tmp_path, capsys):
    assert wanbench("tune", "audit", "--proc-root", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("PARAMETER")
    assert out.endswith("overall: untuned\n")


def test_tune_apply_dry_run_prints_sysctl(tmp_path, capsys):
    assert wanbench("tune", "apply", "--dry-run", "--proc-root", tmp_path, "--format", "jsonl") == 0
    out = capsys.readouterr().out
    assert "sysctl -w net.core.rmem_max=" in out
    assert json.loads(out.splitlines()[-1])["overall"] == "untuned"


def write_log(path):
    lines = [json.dumps({"schema": SCHEMA, "created": "2024-05-01T00:00:00+00:00", "plan": {"iterations": 2}})]
    for iteration, throughput in enumerate((8e9, 10e9), 1):
        result = TransferResult(KIB, 1.0, throughput, 1, 0, Integrity.VERIFIED)
        record = SweepRecord(Cell(5_000, "cubic", "bulk", iteration, KIB), CellStatus.OK, result, "t")
        lines.append(record.to_json())
    path.write_text("\n".join(lines) + "\n")
    return path


def test_report_stats(tmp_path, capsys):
    log = write_log(tmp_path / "sweep.jsonl")
    assert wanbench("report", "stats", "--log", log) == 0
    assert capsys.readouterr().out.splitlines()[1] == (
        "bulk\tcubic\t5000\t1024\t2\t9000000000.000\t9000000000.000\t1000000000.000"
    )


def test_report_tables_and_plots(tmp_path):
    log = write_log(tmp_path / "sweep.jsonl")
    out = tmp_path / "report"
    assert wanbench("report", "tables", "--log", log, "--out", out) == 0
    assert wanbench("report", "plots", "--log", log, "--out", out) == 0
    assert (out / "curve_bulk_cubic_5000us.dat").exists()
    assert json.loads((out / "metadata.json").read_text())["records"] == 2


def test_report_on_a_missing_log(tmp_path, capsys):
    assert wanbench("report", "stats", "--log", tmp_path / "absent.jsonl") == 1
    assert "error:" in capsys.readouterr().err


def test_config_init_and_show(tmp_path, capsys):
    path = tmp_path / "lab.yaml"
    assert wanbench("config", "init", "--path", path) == 0
    assert path.exists()
    assert wanbench("config", "init", "--path", path) == 1
    assert "already exists" in capsys.readouterr().err

    path.write_text("peer_address: 10.0.0.2:7700\n")
    assert wanbench("--config", path, "config", "show") == 0
    out = capsys.readouterr().out
    assert out.startswith("schema_version: 1\n")
    assert "10.0.0.2:7700" in out
