"""
Sweep orchestration: latency x CCA x mode x iteration x file size.

Cells run strictly one after another. Within a latency profile the order
is CCA, then mode, then iteration, then file size ascending, so every
(latency, cca, mode, iteration) block walks the sizes smallest to
largest. Each record is appended to a JSONL log and fsynced before the
next cell starts; rerunning with the same log skips completed cells.
"""

import asyncio
import itertools
import json
import logging
import os
import platform
import shutil
import socket
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Tuple

from bench.dataset import (
    MANIFEST_NAME,
    DatasetManifest,
    DatasetMode,
    DatasetSpec,
    SweepSeries,
    generate_dataset,
    read_manifest,
    stream_dataset,
    synthetic_manifest,
    write_manifest,
)
from errors import LabError, SweepError
from wan.emulation import Emulator, LatencyProfile
from wan.models import DirectorySource, Mode, SyntheticSource, TransferResult, TransferSpec
from wan.sender import transfer, transfer_streaming
from wan.shell import Shell
from wan.tuning import TuningTarget, audit

logger = logging.getLogger(__name__)

SCHEMA = "wanbench.sweep/1"
DEFAULT_ITERATIONS = 3

BulkTransfer = Callable[[TransferSpec, DatasetManifest], Awaitable[TransferResult]]
StreamingTransfer = Callable[..., Awaitable[TransferResult]]


class CellStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


@dataclass(frozen=True)
class Cell:
    """Coordinates of one executed transfer."""

    latency_us: int
    cca: str
    mode: str
    iteration: int
    size: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "latency_us": self.latency_us,
            "cca": self.cca,
            "mode": self.mode,
            "iteration": self.iteration,
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Cell":
        return cls(int(data["latency_us"]), str(data["cca"]), str(data["mode"]), int(data["iteration"]), int(data["size"]))


@dataclass(frozen=True)
class SweepRecord:
    cell: Cell
    status: CellStatus
    result: Optional[TransferResult]
    timestamp: str
    host: Dict[str, Any] = field(default_factory=dict)
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == CellStatus.OK

    def to_json(self) -> str:
        return json.dumps(
            {
                "cell": self.cell.to_dict(),
                "status": self.status.value,
                "result": self.result.to_dict() if self.result else None,
                "error": self.error,
                "timestamp": self.timestamp,
                "host": self.host,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SweepRecord":
        data = json.loads(line)
        return cls(
            cell=Cell.from_dict(data["cell"]),
            status=CellStatus(data["status"]),
            result=TransferResult.from_dict(data["result"]) if data.get("result") else None,
            timestamp=data.get("timestamp", ""),
            host=data.get("host") or {},
            error=data.get("error", ""),
        )


@dataclass(frozen=True)
class SweepPlan:
    """The experimental matrix and the transfer every cell starts from."""

    series: SweepSeries
    latencies: Tuple[LatencyProfile, ...]
    ccas: Tuple[str, ...]
    modes: Tuple[Mode, ...]
    template: TransferSpec
    iterations: int = DEFAULT_ITERATIONS
    regenerate: bool = False
    drop_caches: bool = False
    quiescence: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "latencies", tuple(self.latencies))
        object.__setattr__(self, "ccas", tuple(self.ccas))
        object.__setattr__(self, "modes", tuple(Mode(m) for m in self.modes))
        if self.iterations < 1:
            raise SweepError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("latencies", "ccas", "modes"):
            if not getattr(self, name):
                raise SweepError(f"sweep axis '{name}' is empty")
        if not self.series.sizes:
            raise SweepError("sweep series has no sizes")
        delays = [p.one_way_delay_us for p in self.latencies]
        if len(set(delays)) != len(delays):
            raise SweepError("latency profiles must have distinct delays")

    @property
    def cell_count(self) -> int:
        return len(self.series.sizes) * len(self.latencies) * len(self.ccas) * len(self.modes) * self.iterations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "series": self.series.kind.value,
            "sizes": list(self.series.sizes),
            "latencies": [p.to_dict() for p in self.latencies],
            "ccas": list(self.ccas),
            "modes": [m.value for m in self.modes],
            "iterations": self.iterations,
            "stream_count": self.template.stream_count,
            "chunk_size": self.template.chunk_size,
            "encryption": self.template.encryption.value,
            "socket_buffer": self.template.socket_buffer,
        }


def plan_cells(plan: SweepPlan) -> List[Cell]:
    """Every cell of a plan in execution order."""
    return [
        Cell(profile.one_way_delay_us, cca, mode.value, iteration, size)
        for profile in plan.latencies
        for cca in plan.ccas
        for mode in plan.modes
        for iteration in range(1, plan.iterations + 1)
        for size in sorted(plan.series.sizes)
    ]


def load_records(log_path: Path) -> Tuple[Dict[str, Any], List[SweepRecord]]:
    """Read a record log.

    A torn final line (a crash mid-append) is ignored with a warning.

    Raises:
        SweepError: Missing header, wrong schema or a malformed record
    """
    try:
        lines = Path(log_path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise SweepError(f"cannot read sweep log {log_path}: {e}") from e
    if not lines:
        raise SweepError(f"{log_path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SweepError(f"{log_path}:1: malformed header: {e}") from e
    if header.get("schema") != SCHEMA:
        raise SweepError(f"{log_path}: unsupported schema {header.get('schema')!r}, expected {SCHEMA}")

    records = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(SweepRecord.from_json(line))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            if number == len(lines):
                logger.warning(f"{log_path}:{number}: ignoring incomplete last record")
                break
            raise SweepError(f"{log_path}:{number}: malformed record: {e}") from e
    return header, records


def host_fingerprint(target: Optional[TuningTarget] = None) -> Dict[str, Any]:
    """Identify the host and its tuning state so records label themselves."""
    report = audit(target or TuningTarget())
    return {
        "hostname": socket.gethostname(),
        "kernel": platform.release(),
        "tuning": report.overall.value,
        "mismatched": report.mismatched,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class SweepRunner:
    """Executes a plan cell by cell against a running receiver."""

    def __init__(
        self,
        plan: SweepPlan,
        log_path: Path,
        work_dir: Path,
        emulator: Optional[Emulator] = None,
        bulk_transfer: BulkTransfer = transfer,
        streaming_transfer: StreamingTransfer = transfer_streaming,
        fingerprint: Callable[[], Dict[str, Any]] = host_fingerprint,
        shell: Optional[Shell] = None,
    ):
        self.plan = plan
        self.log_path = Path(log_path)
        self.work_dir = Path(work_dir)
        self.emulator = emulator or Emulator()
        self.bulk_transfer = bulk_transfer
        self.streaming_transfer = streaming_transfer
        self.fingerprint = fingerprint
        self.shell = shell or Shell()
        self._manifests: Dict[Tuple[int, int], DatasetManifest] = {}

    def _open_log(self) -> List[SweepRecord]:
        if self.log_path.exists() and self.log_path.stat().st_size > 0:
            header, records = load_records(self.log_path)
            if header.get("plan") != self.plan.to_dict():
                raise SweepError(f"{self.log_path} was written for a different plan; use a new log to start over")
            logger.info(f"Resuming sweep: {len(records)} of {self.plan.cell_count} cells already recorded")
            return records
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        header = {"schema": SCHEMA, "created": _now(), "plan": self.plan.to_dict()}
        with open(self.log_path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())
        return []

    def _append(self, record: SweepRecord):
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(record.to_json() + "\n")
            f.flush()
            os.fsync(f.fileno())

    async def run(self) -> List[SweepRecord]:
        """Run every cell not yet in the log.

        Returns:
            All records in the log, old and new, in execution order

        Raises:
            PrivilegeError: Emulation is needed but not permitted (before any transfer)
            SweepError: Log unusable
        """
        records = self._open_log()
        done = {r.cell for r in records}
        remaining = [cell for cell in plan_cells(self.plan) if cell not in done]
        if not remaining:
            logger.info("Sweep already complete")
            return records

        profiles = {p.one_way_delay_us: p for p in self.plan.latencies}
        if any(profiles[c.latency_us].emulated for c in remaining):
            self.emulator.require_privilege()
        host = self.fingerprint()

        for latency_us, cells in itertools.groupby(remaining, key=lambda c: c.latency_us):
            profile = profiles[latency_us]
            handle = None
            try:
                if profile.emulated:
                    handle = self.emulator.apply_profile(profile)
                for cell in cells:
                    record = await self._run_cell(cell, host)
                    self._append(record)
                    records.append(record)
                    logger.info(
                        f"Cell {cell.to_dict()} -> {record.status.value}"
                        + (f" {record.result.throughput / 1e9:.3f} Gbps" if record.result else f" ({record.error})")
                    )
            finally:
                if handle is not None:
                    self.emulator.clear_profile(handle)
        return records

    def _drop_caches(self):
        self.shell.run(["sync"])
        result = self.shell.run(["sysctl", "-w", "vm.drop_caches=3"])
        if not result.ok:
            logger.warning(f"Could not drop page caches: {result.stderr.strip()}")

    async def _run_cell(self, cell: Cell, host: Dict[str, Any]) -> SweepRecord:
        try:
            if self.plan.drop_caches:
                self._drop_caches()
            if cell.mode == Mode.BULK.value:
                result = await self._bulk_cell(cell)
            else:
                result = await self._streaming_cell(cell)
        except (LabError, OSError) as e:
            logger.error(f"Cell {cell.to_dict()} failed: {e}")
            return SweepRecord(cell, CellStatus.FAILED, None, _now(), host, str(e))
        status = CellStatus.OK if result.ok else CellStatus.FAILED
        error = "" if result.ok else f"{result.files_failed} file(s) failed"
        return SweepRecord(cell, status, result, _now(), host, error)

    def _dataset_spec(self, size: int) -> DatasetSpec:
        return self.plan.series.per_size_spec.get(size) or DatasetSpec(
            file_size=size, file_count=1, root_path=self.work_dir / f"bulk-{size}"
        )

    def _bulk_manifest(self, cell: Cell) -> Tuple[DatasetSpec, DatasetManifest]:
        spec = replace(self._dataset_spec(cell.size), mode=DatasetMode.BULK)
        key = (cell.size, cell.iteration if self.plan.regenerate else 0)
        if key in self._manifests:
            return spec, self._manifests[key]
        if isinstance(self.plan.template.source, SyntheticSource):
            manifest = synthetic_manifest(spec)
        else:
            manifest_path = spec.root_path / MANIFEST_NAME
            if manifest_path.exists() and not self.plan.regenerate:
                manifest = read_manifest(manifest_path)
            else:
                manifest = generate_dataset(spec)
                write_manifest(manifest, manifest_path)
        self._manifests[key] = manifest
        return spec, manifest

    async def _bulk_cell(self, cell: Cell) -> TransferResult:
        dataset, manifest = self._bulk_manifest(cell)
        if isinstance(self.plan.template.source, SyntheticSource):
            source = SyntheticSource(dataset)
        else:
            source = DirectorySource(dataset.root_path)
        spec = replace(self.plan.template, source=source, mode=Mode.BULK, cca=cell.cca)
        return await self.bulk_transfer(spec, manifest)

    async def _streaming_cell(self, cell: Cell) -> TransferResult:
        watch = self.work_dir / f"stream-{cell.size}-{cell.iteration}"
        shutil.rmtree(watch, ignore_errors=True)
        watch.mkdir(parents=True)
        dataset = replace(self._dataset_spec(cell.size), root_path=watch, mode=DatasetMode.STREAMING_SOURCE)
        spec = replace(self.plan.template, source=DirectorySource(watch), mode=Mode.STREAMING, cca=cell.cca)
        finished = asyncio.Event()

        async def write():
            try:
                await stream_dataset(dataset)
            finally:
                finished.set()

        writer = asyncio.create_task(write())
        try:
            result = await self.streaming_transfer(spec, watch, self.plan.quiescence, done=finished)
            await writer
        finally:
            if not writer.done():
                writer.cancel()
            shutil.rmtree(watch, ignore_errors=True)
        return result


async def run_sweep(plan: SweepPlan, log_path: Path, work_dir: Path, **kwargs) -> List[SweepRecord]:
    """Run (or resume) a sweep; see SweepRunner for the injectable collaborators."""
    return await SweepRunner(plan, log_path, work_dir, **kwargs).run()
