import asyncio
import json

import pytest

from bench import sweep
from bench.dataset import MANIFEST_NAME, SeriesKind, build_sweep_series
from bench.sweep import Cell, CellStatus, SweepPlan, SweepRecord, load_records, plan_cells, run_sweep
from bench.units import KIB
from conftest import FakeShell
from errors import PrivilegeError, SweepError, TransferError
from wan import emulation
from wan.emulation import Emulator, LatencyProfile
from wan.models import DirectorySource, Mode, SyntheticSource, TransferResult, TransferSpec
from wan.storage import EmulationStateStore

NOMINAL = tuple(LatencyProfile(delay, None) for delay in (0, 5_000, 37_000))


class FakeMover:
    """Stands in for the network: returns a result sized after the manifest."""

    def __init__(self, fail_sizes=(), crash_after=None, lose_files=False):
        self.calls = []
        self.fail_sizes = set(fail_sizes)
        self.crash_after = crash_after
        self.lose_files = lose_files

    async def __call__(self, spec, manifest):
        if self.crash_after is not None and len(self.calls) == self.crash_after:
            raise RuntimeError("power cut")
        self.calls.append((spec.cca, spec.source, manifest.entries[0].size))
        if manifest.entries[0].size in self.fail_sizes:
            raise TransferError("peer went away")
        failed = [manifest.entries[0].path] if self.lose_files else []
        return TransferResult.build(
            bytes_moved=manifest.total_bytes,
            wall_time=0.5,
            files_ok=len(manifest) - len(failed),
            failed_files=failed,
            per_stream_bytes=[manifest.total_bytes],
        )


def make_plan(tmp_path, latencies=NOMINAL, ccas=("cubic",), modes=(Mode.BULK,), iterations=2, source=None, **kwargs):
    series = build_sweep_series(SeriesKind.BULK, KIB, 4 * KIB, budget=16 * KIB, root=tmp_path / "data")
    template = TransferSpec(source=source or SyntheticSource(None), peer_address="127.0.0.1:9")
    return SweepPlan(series, latencies, ccas, modes, template, iterations=iterations, **kwargs)


def run(plan, tmp_path, mover, **kwargs):
    kwargs.setdefault("fingerprint", lambda: {"hostname": "lab-a", "tuning": "tuned"})
    return asyncio.run(run_sweep(plan, tmp_path / "sweep.jsonl", tmp_path / "work", bulk_transfer=mover, **kwargs))


def test_cells_run_in_the_documented_order(tmp_path):
    plan = make_plan(tmp_path, iterations=2)
    records = run(plan, tmp_path, FakeMover())

    assert plan.cell_count == 18
    assert [r.cell for r in records] == plan_cells(plan)
    assert [r.cell.size for r in records[:6]] == [KIB, 2 * KIB, 4 * KIB] * 2
    assert [r.cell.iteration for r in records[:6]] == [1, 1, 1, 2, 2, 2]
    assert [r.cell.latency_us for r in records[::6]] == [0, 5_000, 37_000]
    assert all(r.ok for r in records)
    assert records[0].host == {"hostname": "lab-a", "tuning": "tuned"}


def test_cca_mode_and_iteration_nest_inside_latency(tmp_path):
    plan = make_plan(tmp_path, latencies=NOMINAL[:1], ccas=("cubic", "bbr"), iterations=1)
    cells = plan_cells(plan)
    assert [(c.cca, c.size) for c in cells] == [
        ("cubic", KIB), ("cubic", 2 * KIB), ("cubic", 4 * KIB),
        ("bbr", KIB), ("bbr", 2 * KIB), ("bbr", 4 * KIB),
    ]


def test_each_cell_uses_its_congestion_control(tmp_path):
    mover = FakeMover()
    run(make_plan(tmp_path, latencies=NOMINAL[:1], ccas=("cubic", "bbr"), iterations=1), tmp_path, mover)
    assert [cca for cca, _, _ in mover.calls] == ["cubic"] * 3 + ["bbr"] * 3


def test_log_is_jsonl_with_a_plan_header(tmp_path):
    plan = make_plan(tmp_path, iterations=1)
    run(plan, tmp_path, FakeMover())
    lines = (tmp_path / "sweep.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["schema"] == sweep.SCHEMA
    assert header["plan"] == plan.to_dict()
    assert len(lines) == 1 + 9
    assert json.loads(lines[1])["cell"] == {"latency_us": 0, "cca": "cubic", "mode": "bulk", "iteration": 1, "size": KIB}


def test_interrupted_sweep_resumes_where_it_stopped(tmp_path):
    plan = make_plan(tmp_path)
    with pytest.raises(RuntimeError):
        run(plan, tmp_path, FakeMover(crash_after=7))
    _, partial = load_records(tmp_path / "sweep.jsonl")
    assert len(partial) == 7

    mover = FakeMover()
    records = run(plan, tmp_path, mover)
    assert len(mover.calls) == 11
    assert [r.cell for r in records] == plan_cells(plan)
    assert len(set(r.cell for r in records)) == 18


def test_completed_sweep_runs_nothing(tmp_path):
    plan = make_plan(tmp_path, iterations=1)
    run(plan, tmp_path, FakeMover())
    mover = FakeMover()
    assert len(run(plan, tmp_path, mover)) == 9
    assert mover.calls == []


def test_failed_cell_is_recorded_and_the_sweep_continues(tmp_path):
    records = run(make_plan(tmp_path), tmp_path, FakeMover(fail_sizes={2 * KIB}))
    failed = [r for r in records if not r.ok]
    assert len(records) == 18
    assert len(failed) == 6
    assert all(r.cell.size == 2 * KIB and r.result is None for r in failed)
    assert failed[0].error == "peer went away"


def test_unreadable_source_fails_only_its_cell(tmp_path):
    mover = FakeMover()

    async def vanishing(spec, manifest):
        if manifest.entries[0].size == 2 * KIB:
            raise FileNotFoundError(2, "No such file or directory", "d0000/f00000000.bin")
        return await mover(spec, manifest)

    records = run(make_plan(tmp_path, iterations=1), tmp_path, vanishing)
    failed = [r for r in records if not r.ok]
    assert len(records) == 9
    assert [r.cell.size for r in failed] == [2 * KIB] * 3
    assert "d0000/f00000000.bin" in failed[0].error


def test_partial_delivery_marks_the_cell_failed(tmp_path):
    records = run(make_plan(tmp_path, iterations=1), tmp_path, FakeMover(lose_files=True))
    assert all(r.status == CellStatus.FAILED for r in records)
    assert records[0].error == "1 file(s) failed"
    assert records[0].result is not None


def test_missing_privilege_stops_before_any_transfer(tmp_path, monkeypatch):
    monkeypatch.setattr(emulation.psutil, "net_if_addrs", lambda: {"lo": []})
    status = tmp_path / "status"
    status.write_text("CapEff:\t0000000000000000\n")
    emulator = Emulator(FakeShell(), EmulationStateStore(tmp_path / "state.db"), status)
    plan = make_plan(tmp_path, latencies=(LatencyProfile(5_000, "lo"),))
    mover = FakeMover()

    with pytest.raises(PrivilegeError):
        run(plan, tmp_path, mover, emulator=emulator)
    assert mover.calls == []
    _, records = load_records(tmp_path / "sweep.jsonl")
    assert records == []


def test_profiles_are_applied_once_per_latency_and_cleared(tmp_path, monkeypatch):
    monkeypatch.setattr(emulation.psutil, "net_if_addrs", lambda: {"lo": []})
    status = tmp_path / "status"
    status.write_text("CapEff:\t0000000000001000\n")
    shell = FakeShell()
    emulator = Emulator(shell, EmulationStateStore(tmp_path / "state.db"), status)
    latencies = tuple(LatencyProfile(d, "lo") for d in (5_000, 37_000))

    run(make_plan(tmp_path, latencies=latencies, iterations=1), tmp_path, FakeMover(), emulator=emulator)

    kinds = [line.split()[2] for line in shell.commands]
    assert kinds == ["show", "replace", "del", "show", "replace", "del"]
    assert "delay 5000us" in shell.commands[1]
    assert "delay 37000us" in shell.commands[4]
    assert emulator.store.applied() == []


def test_profile_is_cleared_when_a_cell_crashes(tmp_path, monkeypatch):
    monkeypatch.setattr(emulation.psutil, "net_if_addrs", lambda: {"lo": []})
    status = tmp_path / "status"
    status.write_text("CapEff:\t0000000000001000\n")
    shell = FakeShell()
    emulator = Emulator(shell, EmulationStateStore(tmp_path / "state.db"), status)

    with pytest.raises(RuntimeError):
        run(make_plan(tmp_path, latencies=(LatencyProfile(5_000, "lo"),)), tmp_path, FakeMover(crash_after=1),
            emulator=emulator)
    assert shell.commands[-1] == "tc qdisc del dev lo root"


def test_log_from_another_plan_is_refused(tmp_path):
    run(make_plan(tmp_path, iterations=1), tmp_path, FakeMover())
    with pytest.raises(SweepError, match="different plan"):
        run(make_plan(tmp_path, iterations=2), tmp_path, FakeMover())


def test_directory_datasets_are_generated_once(tmp_path, monkeypatch):
    generated = []
    original = sweep.generate_dataset

    def counting(spec, *args, **kwargs):
        generated.append(spec.file_size)
        return original(spec, *args, **kwargs)

    monkeypatch.setattr(sweep, "generate_dataset", counting)
    plan = make_plan(tmp_path, latencies=NOMINAL[:1], iterations=2, source=DirectorySource(tmp_path))
    mover = FakeMover()
    run(plan, tmp_path, mover)

    assert generated == [KIB, 2 * KIB, 4 * KIB]
    assert (tmp_path / "data" / f"bulk-{KIB}" / MANIFEST_NAME).exists()
    assert mover.calls[0][1] == DirectorySource(tmp_path / "data" / f"bulk-{KIB}")


def test_regenerate_makes_fresh_datasets_per_iteration(tmp_path, monkeypatch):
    generated = []
    original = sweep.generate_dataset

    def counting(spec, *args, **kwargs):
        generated.append(spec.file_size)
        return original(spec, *args, **kwargs)

    monkeypatch.setattr(sweep, "generate_dataset", counting)
    plan = make_plan(tmp_path, latencies=NOMINAL[:1], iterations=2, source=DirectorySource(tmp_path), regenerate=True)
    run(plan, tmp_path, FakeMover())
    assert len(generated) == 6


def test_page_caches_are_dropped_before_each_cell(tmp_path):
    shell = FakeShell()
    run(make_plan(tmp_path, latencies=NOMINAL[:1], iterations=1, drop_caches=True), tmp_path, FakeMover(), shell=shell)
    assert shell.commands == ["sync", "sysctl -w vm.drop_caches=3"] * 3


def test_streaming_cells_write_while_the_mover_watches(tmp_path):
    watched = []

    async def fake_streaming(spec, watch, quiescence, done):
        await done.wait()
        watched.append(watch)
        size = sum(p.stat().st_size for p in watch.rglob("*.bin"))
        return TransferResult.build(size, 0.1, 1, [], [size])

    plan = make_plan(tmp_path, latencies=NOMINAL[:1], modes=(Mode.STREAMING,), iterations=1)
    records = run(plan, tmp_path, FakeMover(), streaming_transfer=fake_streaming)

    assert [r.result.bytes_moved for r in records] == [KIB * 16, 2 * KIB * 8, 4 * KIB * 4]
    assert all(not w.exists() for w in watched)


def test_torn_last_record_is_ignored(tmp_path):
    run(make_plan(tmp_path, iterations=1), tmp_path, FakeMover())
    log = tmp_path / "sweep.jsonl"
    with open(log, "a") as f:
        f.write('{"cell": {"latency_us": 0')
    _, records = load_records(log)
    assert len(records) == 9


def test_malformed_record_in_the_middle_is_an_error(tmp_path):
    run(make_plan(tmp_path, iterations=1), tmp_path, FakeMover())
    log = tmp_path / "sweep.jsonl"
    lines = log.read_text().splitlines()
    lines[3] = "not json"
    log.write_text("\n".join(lines) + "\n")
    with pytest.raises(SweepError, match=":4:"):
        load_records(log)


def test_missing_log_is_a_sweep_error(tmp_path):
    with pytest.raises(SweepError):
        load_records(tmp_path / "absent.jsonl")


def test_record_json_round_trip():
    result = TransferResult.build(1000, 0.5, 1, [], [1000])
    record = SweepRecord(Cell(5_000, "bbr", "bulk", 2, KIB), CellStatus.OK, result, "2024-01-01T00:00:00+00:00")
    assert SweepRecord.from_json(record.to_json()) == record


@pytest.mark.parametrize(
    "kwargs",
    [
        {"iterations": 0},
        {"ccas": ()},
        {"modes": ()},
        {"latencies": (LatencyProfile(5_000, None), LatencyProfile(5_000, "lo"))},
    ],
)
def test_plan_validation(tmp_path, kwargs):
    with pytest.raises(SweepError):
        make_plan(tmp_path, **kwargs)
