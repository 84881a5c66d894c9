"""
Local staging between production storage and a burst buffer.

Staging copies a manifest's files concurrently, verifying each copy
against the manifest digest before it becomes visible under its final
name. Files already present with the right digest are skipped, so an
interrupted job can simply be run again.
"""

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Tuple

from bench.calc import Bandwidth
from bench.dataset import IO_BLOCK, ContentStream, DatasetManifest, ManifestEntry, check_free_space, hash_file
from errors import DatasetError, TransferError
from wan.models import TransferResult
from wan.sender import schedule_lpt

logger = logging.getLogger(__name__)


class Direction(str, Enum):
    STAGE_IN = "stage-in"
    STAGE_OUT = "stage-out"


@dataclass(frozen=True)
class StagingJob:
    source: Path
    destination: Path
    manifest: DatasetManifest
    direction: Direction = Direction.STAGE_IN

    def __post_init__(self):
        object.__setattr__(self, "source", Path(self.source))
        object.__setattr__(self, "destination", Path(self.destination))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.source.resolve() == self.destination.resolve():
            raise TransferError(f"staging source and destination are the same directory: {self.source}")


@dataclass
class _WorkerTally:
    bytes_ok: int = 0
    files_ok: int = 0
    failed: Tuple[str, ...] = ()


def _already_staged(target: Path, entry: ManifestEntry) -> bool:
    try:
        if target.stat().st_size != entry.size:
            return False
    except FileNotFoundError:
        return False
    return hash_file(target) == entry.digest


def _copy_verified(source: Path, target: Path, entry: ManifestEntry):
    part = target.with_name(target.name + ".part")
    target.parent.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    try:
        with open(source, "rb") as src, open(part, "wb") as dst:
            while block := src.read(IO_BLOCK):
                digest.update(block)
                dst.write(block)
            dst.flush()
            os.fsync(dst.fileno())
        if digest.hexdigest() != entry.digest:
            raise DatasetError(f"{entry.path}: copy digest does not match the manifest")
        os.replace(part, target)
    except BaseException:
        part.unlink(missing_ok=True)
        raise


def _run_worker(job: StagingJob, entries: List[ManifestEntry]) -> _WorkerTally:
    tally = _WorkerTally()
    failed = []
    for entry in entries:
        target = job.destination / entry.path
        try:
            if not _already_staged(target, entry):
                _copy_verified(job.source / entry.path, target, entry)
            tally.bytes_ok += entry.size
            tally.files_ok += 1
        except (OSError, DatasetError) as e:
            logger.error(f"Staging {entry.path} failed: {e}")
            failed.append(entry.path)
    tally.failed = tuple(failed)
    return tally


def stage(job: StagingJob, workers: int = 8) -> TransferResult:
    """Copy a dataset between local directories with digest verification.

    Args:
        job: What to copy and where
        workers: Concurrent copy streams

    Returns:
        Result with the staging throughput; failed files are tallied and
        the job can be rerun to finish them

    Raises:
        InsufficientSpaceError: Destination cannot hold the dataset
        TransferError: Source directory missing
    """
    if not job.source.is_dir():
        raise TransferError(f"staging source {job.source} does not exist")
    job.destination.mkdir(parents=True, exist_ok=True)
    present = 0
    for entry in job.manifest.entries:
        target = job.destination / entry.path
        if target.exists() and target.stat().st_size == entry.size:
            present += entry.size
    check_free_space(job.destination, job.manifest.total_bytes - present)

    entries = job.manifest.entries
    plan = schedule_lpt([e.size for e in entries], max(1, workers))
    logger.info(
        f"{job.direction.value}: {len(entries)} files, {job.manifest.total_bytes} bytes "
        f"from {job.source} to {job.destination}"
    )
    started = time.monotonic()
    with ThreadPoolExecutor(max_workers=len(plan)) as pool:
        tallies = list(pool.map(lambda files: _run_worker(job, [entries[i] for i in files]), plan))
    wall_time = time.monotonic() - started

    result = TransferResult.build(
        bytes_moved=sum(t.bytes_ok for t in tallies),
        wall_time=wall_time,
        files_ok=sum(t.files_ok for t in tallies),
        failed_files=[path for t in tallies for path in t.failed],
        per_stream_bytes=[t.bytes_ok for t in tallies],
    )
    logger.info(f"{job.direction.value} finished at {result.throughput / 1e9:.3f} Gbps, {result.files_failed} failed")
    return result


@dataclass(frozen=True)
class StorageProbe:
    """Sequential storage throughput compared with the rate the network must sustain."""

    root: Path
    size: int
    write_bps: float
    read_bps: float
    target: Bandwidth

    @property
    def sufficient(self) -> bool:
        return min(self.write_bps, self.read_bps) >= self.target.bits_per_second


def probe_storage(root: Path, size: int, target: Bandwidth, block: int = IO_BLOCK) -> StorageProbe:
    """Write then read back a probe file and time both passes.

    The page cache is dropped for the probe file before reading where the
    platform allows it.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    check_free_space(root, size)
    probe = root / ".wanbench-probe"
    stream = ContentStream(0, 0)
    try:
        started = time.monotonic()
        with open(probe, "wb") as f:
            for data in stream.blocks(size, block):
                f.write(data)
            f.flush()
            os.fsync(f.fileno())
        write_time = time.monotonic() - started

        with open(probe, "rb") as f:
            if hasattr(os, "posix_fadvise"):
                os.posix_fadvise(f.fileno(), 0, 0, os.POSIX_FADV_DONTNEED)
            started = time.monotonic()
            while f.read(block):
                pass
            read_time = time.monotonic() - started
    finally:
        probe.unlink(missing_ok=True)

    result = StorageProbe(
        root=root,
        size=size,
        write_bps=size * 8 / write_time if write_time > 0 else float("inf"),
        read_bps=size * 8 / read_time if read_time > 0 else float("inf"),
        target=target,
    )
    logger.info(
        f"Storage probe {root}: write {result.write_bps / 1e9:.2f} Gbps, read {result.read_bps / 1e9:.2f} Gbps, "
        f"target {target.bits_per_second / 1e9:.2f} Gbps"
    )
    return result

