"""
Synthetic dataset generation and verification.

Datasets are uniform-size files whose content is an incompressible
keyed counter-mode stream (numpy's Philox keyed by the dataset seed and
the file index), so identical specs produce byte-identical files on
every host. Files are sharded into sub-directories of at most 4096
entries.

Manifest file format (UTF-8, LF line endings):

    line 1:   "# wanbench-manifest 1 " + JSON header
              {"file_count", "root", "spec", "total_bytes"} (keys sorted)
    line 2..: "<relative path>\\t<size>\\t<sha256 hex>" in manifest order
"""

import asyncio
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import psutil

from bench.units import GIB, KIB, MIB, TIB
from errors import DatasetError, InsufficientSpaceError

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "# wanbench-manifest 1 "
SHARD_SIZE = 4096
HYPERSCALE_FILES = 1 << 20
IO_BLOCK = 4 * MIB
PARTIAL_MARKER = ".wanbench-partial"
END_OF_SOURCE_MARKER = ".wanbench-end-of-source"
MANIFEST_NAME = ".wanbench-manifest"
_SEED_MASK = (1 << 64) - 1


class DatasetMode(str, Enum):
    BULK = "bulk"
    STREAMING_SOURCE = "streaming-source"


class SeriesKind(str, Enum):
    BULK = "bulk"
    STREAMING = "streaming"


def is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class DatasetSpec:
    """Declarative description of a uniform-size synthetic dataset."""

    file_size: int
    file_count: int
    root_path: Path
    content_seed: int = 0
    mode: DatasetMode = DatasetMode.BULK

    def __post_init__(self):
        if not is_power_of_two(self.file_size):
            raise DatasetError(f"file_size must be a power of two, got {self.file_size}")
        if self.file_count < 1:
            raise DatasetError(f"file_count must be >= 1, got {self.file_count}")
        object.__setattr__(self, "root_path", Path(self.root_path))
        object.__setattr__(self, "mode", DatasetMode(self.mode))

    @property
    def total_bytes(self) -> int:
        return self.file_size * self.file_count

    def to_dict(self) -> Dict:
        return {
            "content_seed": self.content_seed,
            "file_count": self.file_count,
            "file_size": self.file_size,
            "mode": self.mode.value,
            "root_path": str(self.root_path),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetSpec":
        return cls(
            file_size=int(data["file_size"]),
            file_count=int(data["file_count"]),
            root_path=Path(data["root_path"]),
            content_seed=int(data.get("content_seed", 0)),
            mode=DatasetMode(data.get("mode", DatasetMode.BULK.value)),
        )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    size: int
    digest: str


@dataclass(frozen=True)
class DatasetManifest:
    """Realized inventory of a dataset. Immutable and safe to share."""

    entries: Tuple[ManifestEntry, ...]
    total_bytes: int
    root: Path
    spec: Optional[DatasetSpec] = None

    def __post_init__(self):
        if sum(e.size for e in self.entries) != self.total_bytes:
            raise DatasetError("manifest total_bytes does not equal the sum of entry sizes")
        if self.spec is not None:
            odd = [e.path for e in self.entries if e.size != self.spec.file_size]
            if odd:
                raise DatasetError(f"{len(odd)} entries differ from the spec file size, first: {odd[0]}")

    @property
    def digest(self) -> bytes:
        """SHA-256 over the entry lines; identifies the content regardless of root."""
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.path}\t{e.size}\t{e.digest}\n".encode("utf-8"))
        return h.digest()

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SweepSeries:
    kind: SeriesKind
    sizes: Tuple[int, ...]
    per_size_spec: Dict[int, DatasetSpec] = field(default_factory=dict)


@dataclass
class VerificationReport:
    """Empty lists mean the dataset is intact."""

    checked: int = 0
    missing: List[str] = field(default_factory=list)
    size_deviations: List[Tuple[str, int, int]] = field(default_factory=list)
    digest_mismatches: List[str] = field(default_factory=list)

    @property
    def intact(self) -> bool:
        return not (self.missing or self.size_deviations or self.digest_mismatches)

    @property
    def problem_count(self) -> int:
        return len(self.missing) + len(self.size_deviations) + len(self.digest_mismatches)


class ContentStream:
    """Deterministic incompressible byte stream for one file.

    A Philox counter-based generator keyed by (content_seed, file index);
    64-bit outputs are serialized little-endian.
    """

    def __init__(self, content_seed: int, index: int):
        key = ((index & _SEED_MASK) << 64) | (content_seed & _SEED_MASK)
        self._bitgen = np.random.Philox(key=key)
        self._leftover = b""

    def read(self, size: int) -> bytes:
        if size <= len(self._leftover):
            data, self._leftover = self._leftover[:size], self._leftover[size:]
            return data
        needed = size - len(self._leftover)
        words = (needed + 7) // 8
        raw = self._bitgen.random_raw(words).astype("<u8", copy=False).tobytes()
        data = self._leftover + raw[:needed]
        self._leftover = raw[needed:]
        return data

    def blocks(self, total: int, block: int = IO_BLOCK) -> Iterator[bytes]:
        remaining = total
        while remaining > 0:
            n = min(block, remaining)
            remaining -= n
            yield self.read(n)


def entry_path(index: int) -> str:
    """Relative path of the index-th file: shard directory plus zero-padded name."""
    return f"d{index // SHARD_SIZE:04d}/f{index:08d}.bin"


def _existing_ancestor(path: Path) -> Path:
    path = path.resolve()
    while not path.exists() and path != path.parent:
        path = path.parent
    return path


def check_free_space(root: Path, needed: int):
    """Raise InsufficientSpaceError when the filesystem holding root lacks room."""
    free = psutil.disk_usage(str(_existing_ancestor(Path(root)))).free
    if free < needed:
        raise InsufficientSpaceError(
            f"{root} needs {needed} bytes but only {free} are free"
        )


def _write_entry(spec: DatasetSpec, index: int, written: List[Path]) -> ManifestEntry:
    rel = entry_path(index)
    final = spec.root_path / rel
    part = final.with_name(final.name + ".part")
    final.parent.mkdir(parents=True, exist_ok=True)
    written.append(part)
    digest = hashlib.sha256()
    with open(part, "wb") as f:
        for block in ContentStream(spec.content_seed, index).blocks(spec.file_size):
            digest.update(block)
            f.write(block)
    os.replace(part, final)
    written.append(final)
    return ManifestEntry(rel, spec.file_size, digest.hexdigest())


def generate_dataset(spec: DatasetSpec, workers: int = 8) -> DatasetManifest:
    """Write a dataset to disk and return its manifest.

    Args:
        spec: Dataset to realize
        workers: Concurrent file writers

    Returns:
        Manifest whose digests match the on-disk content

    Raises:
        InsufficientSpaceError: Checked before anything is written
        DatasetError: A write failed; partial files are listed in the
            partial marker and on the exception for cleanup_partial
    """
    check_free_space(spec.root_path, spec.total_bytes)
    spec.root_path.mkdir(parents=True, exist_ok=True)
    logger.info(f"Generating {spec.file_count} x {spec.file_size} B under {spec.root_path}")

    written: List[Path] = []
    entries: List[ManifestEntry] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            # One shard per batch keeps the number of pending futures bounded.
            for start in range(0, spec.file_count, SHARD_SIZE):
                stop = min(start + SHARD_SIZE, spec.file_count)
                entries.extend(pool.map(lambda i: _write_entry(spec, i, written), range(start, stop)))
    except Exception as e:
        partial = sorted({str(p) for p in written if p.exists()})
        marker = spec.root_path / PARTIAL_MARKER
        try:
            marker.write_text("\n".join(partial) + "\n", encoding="utf-8")
        except OSError:
            logger.error(f"Could not record partial files in {marker}")
        logger.error(f"Dataset generation failed after {len(entries)} files: {e}")
        raise DatasetError(f"dataset generation failed: {e}", partial_paths=partial) from e

    manifest = DatasetManifest(tuple(entries), spec.total_bytes, spec.root_path, spec)
    logger.info(f"Generated {len(entries)} files, {manifest.total_bytes} bytes")
    return manifest


def cleanup_partial(root: Path) -> int:
    """Remove files recorded by a failed generation. Returns the count removed."""
    marker = Path(root) / PARTIAL_MARKER
    if not marker.exists():
        return 0
    removed = 0
    for line in marker.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            Path(line).unlink()
            removed += 1
        except FileNotFoundError:
            pass
    marker.unlink()
    logger.info(f"Removed {removed} partial files under {root}")
    return removed


def synthetic_manifest(spec: DatasetSpec) -> DatasetManifest:
    """Manifest of a synthetic dataset computed in memory; nothing touches disk."""
    entries = []
    for index in range(spec.file_count):
        digest = hashlib.sha256()
        for block in ContentStream(spec.content_seed, index).blocks(spec.file_size):
            digest.update(block)
        entries.append(ManifestEntry(entry_path(index), spec.file_size, digest.hexdigest()))
    return DatasetManifest(tuple(entries), spec.total_bytes, spec.root_path, spec)


def hash_file(path: Path, block: int = IO_BLOCK) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(block):
            digest.update(chunk)
    return digest.hexdigest()


def scan_directory(root: Path, workers: int = 8) -> DatasetManifest:
    """Build a manifest for an arbitrary directory tree (any file sizes)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a readable directory")
    files = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.startswith(".wanbench-") or name.endswith(".part"):
                continue
            full = Path(dirpath) / name
            files.append((full.relative_to(root).as_posix(), full))
    files.sort()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        digests = list(pool.map(lambda item: hash_file(item[1]), files))
    entries = tuple(
        ManifestEntry(rel, full.stat().st_size, digest) for (rel, full), digest in zip(files, digests)
    )
    return DatasetManifest(entries, sum(e.size for e in entries), root, None)


def _check_entry(root: Path, entry: ManifestEntry) -> Tuple[str, Optional[Tuple]]:
    path = root / entry.path
    try:
        size = path.stat().st_size
    except FileNotFoundError:
        return "missing", None
    if size != entry.size:
        return "size", (entry.path, entry.size, size)
    if hash_file(path) != entry.digest:
        return "digest", None
    return "ok", None


def verify_dataset(manifest: DatasetManifest, root: Optional[Path] = None, workers: int = 8) -> VerificationReport:
    """Re-digest every file listed in a manifest.

    Args:
        manifest: Manifest to check against
        root: Directory to check; defaults to the manifest root
        workers: Concurrent readers

    Returns:
        Report of missing files, size deviations and digest mismatches

    Raises:
        DatasetError: Root is missing or unreadable
    """
    root = Path(root or manifest.root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise DatasetError(f"cannot read dataset root {root}")

    report = VerificationReport()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = pool.map(lambda e: _check_entry(root, e), manifest.entries)
        for entry, (status, detail) in zip(manifest.entries, outcomes):
            report.checked += 1
            if status == "missing":
                report.missing.append(entry.path)
            elif status == "size":
                report.size_deviations.append(detail)
            elif status == "digest":
                report.digest_mismatches.append(entry.path)
    if not report.intact:
        logger.warning(f"Verification of {root} found {report.problem_count} problem(s)")
    return report


def write_manifest(manifest: DatasetManifest, path: Path):
    """Persist a manifest in the line-delimited format described above."""
    header = {
        "file_count": len(manifest.entries),
        "root": str(manifest.root),
        "spec": manifest.spec.to_dict() if manifest.spec else None,
        "total_bytes": manifest.total_bytes,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(MANIFEST_MAGIC + json.dumps(header, sort_keys=True) + "\n")
        for e in manifest.entries:
            f.write(f"{e.path}\t{e.size}\t{e.digest}\n")


def read_manifest(path: Path) -> DatasetManifest:
    """Load a manifest written by write_manifest.

    Raises:
        DatasetError: File missing or malformed (with line number)
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise DatasetError(f"{path}:1: not a wanbench manifest")
    try:
        header = json.loads(lines[0][len(MANIFEST_MAGIC):])
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:1: malformed header: {e}") from e

    entries = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1].isdigit() or len(parts[2]) != 64:
            raise DatasetError(f"{path}:{number}: expected '<path>\\t<size>\\t<sha256>'")
        entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
    if len(entries) != header.get("file_count"):
        raise DatasetError(f"{path}: header announces {header.get('file_count')} entries, found {len(entries)}")

    spec = DatasetSpec.from_dict(header["spec"]) if header.get("spec") else None
    return DatasetManifest(tuple(entries), int(header["total_bytes"]), Path(header["root"]), spec)


def locate_manifest(root: Path, manifest_path: Optional[Path] = None, workers: int = 8) -> DatasetManifest:
    """Manifest for the dataset at root.

    An explicit manifest file wins, then the one generate stores beside the
    data, else the directory is scanned. A stored manifest is rebased onto
    root so a dataset can be moved or staged elsewhere.
    """
    root = Path(root)
    path = Path(manifest_path) if manifest_path else root / MANIFEST_NAME
    if path.exists():
        manifest = read_manifest(path)
        if manifest.spec is not None:
            return replace(manifest, root=root, spec=replace(manifest.spec, root_path=root))
        return replace(manifest, root=root)
    if manifest_path:
        raise DatasetError(f"manifest {manifest_path} does not exist")
    logger.info(f"No manifest under {root}; scanning the directory")
    return scan_directory(root, workers)


def hyperscale_spec(
    file_size: int,
    root: Path,
    seed: int = 0,
    file_count: Optional[int] = None,
    total_bytes: Optional[int] = None,
) -> DatasetSpec:
    """Hyperscale dataset: 2^20 files and/or a fixed aggregate size.

    The two knobs are independent; when both are given the smaller file
    count wins.
    """
    counts = []
    if file_count is not None:
        counts.append(file_count)
    if total_bytes is not None:
        counts.append(max(1, total_bytes // file_size))
    count = min(counts) if counts else HYPERSCALE_FILES
    return DatasetSpec(file_size=file_size, file_count=count, root_path=Path(root), content_seed=seed)


def build_sweep_series(
    kind: SeriesKind,
    min_size: int,
    max_size: int,
    budget: Optional[int] = None,
    root: Path = Path("."),
    seed: int = 0,
) -> SweepSeries:
    """All power-of-two file sizes in [min_size, max_size] with downscaled counts.

    Each size gets clamp(budget // size, 1, 2^20) files; an unbounded budget
    means 2^20 files per size.

    Raises:
        DatasetError: Bounds are not powers of two or min > max
    """
    kind = SeriesKind(kind)
    if not is_power_of_two(min_size) or not is_power_of_two(max_size):
        raise DatasetError(f"sweep bounds must be powers of two, got {min_size} and {max_size}")
    if min_size > max_size:
        raise DatasetError(f"minimum size {min_size} exceeds maximum {max_size}")

    mode = DatasetMode.BULK if kind == SeriesKind.BULK else DatasetMode.STREAMING_SOURCE
    sizes = []
    per_size = {}
    size = min_size
    while size <= max_size:
        count = HYPERSCALE_FILES if budget is None else min(max(budget // size, 1), HYPERSCALE_FILES)
        sizes.append(size)
        per_size[size] = DatasetSpec(
            file_size=size,
            file_count=count,
            root_path=Path(root) / f"{kind.value}-{size}",
            content_seed=seed,
            mode=mode,
        )
        size <<= 1
    return SweepSeries(kind, tuple(sizes), per_size)


FULL_BULK_RANGE = (KIB, TIB)
FULL_STREAMING_RANGE = (4 * MIB, TIB)
DESK_BUDGET = 4 * GIB


async def stream_dataset(
    spec: DatasetSpec,
    step: int = 4 * MIB,
    pause: float = 0.0,
    concurrency: int = 1,
) -> DatasetManifest:
    """Grow a dataset on disk while a streaming session watches it.

    Files are appended in `step` increments with an optional pause between
    appends; the end-of-source marker is written last.

    Returns:
        Manifest of the final content
    """
    spec.root_path.mkdir(parents=True, exist_ok=True)
    check_free_space(spec.root_path, spec.total_bytes)
    semaphore = asyncio.Semaphore(max(1, concurrency))

    def append(path: Path, data: bytes):
        with open(path, "ab") as f:
            f.write(data)
            f.flush()

    async def grow(index: int) -> ManifestEntry:
        async with semaphore:
            rel = entry_path(index)
            path = spec.root_path / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
            digest = hashlib.sha256()
            for block in ContentStream(spec.content_seed, index).blocks(spec.file_size, block=step):
                digest.update(block)
                await asyncio.to_thread(append, path, block)
                if pause:
                    await asyncio.sleep(pause)
            return ManifestEntry(rel, spec.file_size, digest.hexdigest())

    entries = await asyncio.gather(*(grow(i) for i in range(spec.file_count)))
    (spec.root_path / END_OF_SOURCE_MARKER).touch()
    logger.info(f"Streaming writer finished {spec.file_count} files under {spec.root_path}")
    return DatasetManifest(tuple(entries), spec.total_bytes, spec.root_path, spec)
