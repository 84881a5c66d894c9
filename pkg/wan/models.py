"""
Shared transfer types: endpoints, transfer specifications and results.
"""

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from errors import TransferError

MIN_CHUNK_SIZE = 4 << 10
DEFAULT_CHUNK_SIZE = 4 << 20


class Mode(str, Enum):
    BULK = "bulk"
    STREAMING = "streaming"


class Encryption(str, Enum):
    NONE = "none"
    TLS = "tls"


class Integrity(str, Enum):
    VERIFIED = "verified"
    FAILED = "failed"
    SKIPPED = "skipped"


def split_address(address: str) -> Tuple[str, int]:
    """Split 'host:port' (or '[v6]:port') into its parts.

    Raises:
        TransferError: Address has no valid port
    """
    host, sep, port = str(address).rpartition(":")
    if not sep or not host:
        raise TransferError(f"address '{address}' must look like host:port")
    try:
        port_number = int(port)
    except ValueError:
        raise TransferError(f"address '{address}' has a non-numeric port")
    if not 0 <= port_number <= 65535:
        raise TransferError(f"address '{address}' has an out-of-range port")
    return host.strip("[]"), port_number


@dataclass(frozen=True)
class DirectorySource:
    root: Path


@dataclass(frozen=True)
class SyntheticSource:
    """Generate file content on the fly from a dataset spec; nothing is read from disk."""

    spec: Any  # bench.dataset.DatasetSpec


@dataclass(frozen=True)
class DirectorySink:
    """Write under the receiver's root, optionally in a sub-directory."""

    subdir: str = ""


@dataclass(frozen=True)
class DiscardSink:
    """Receiver digests and drops the bytes."""


Source = Union[DirectorySource, SyntheticSource]
Sink = Union[DirectorySink, DiscardSink]


@dataclass(frozen=True)
class TransferSpec:
    """Everything needed to run one transfer."""

    source: Source
    peer_address: str
    sink: Sink = DirectorySink()
    mode: Mode = Mode.BULK
    stream_count: int = 8
    chunk_size: int = DEFAULT_CHUNK_SIZE
    encryption: Encryption = Encryption.NONE
    cca: Optional[str] = None
    socket_buffer: Optional[int] = None
    verify: bool = True

    def __post_init__(self):
        if self.stream_count < 1:
            raise TransferError(f"stream_count must be >= 1, got {self.stream_count}")
        if self.chunk_size < MIN_CHUNK_SIZE:
            raise TransferError(f"chunk_size must be >= {MIN_CHUNK_SIZE} bytes, got {self.chunk_size}")
        if self.mode == Mode.STREAMING and not isinstance(self.source, DirectorySource):
            raise TransferError("streaming mode requires a directory source")
        split_address(self.peer_address)


@dataclass(frozen=True)
class TransferResult:
    """Measured outcome of one transfer. Immutable once returned."""

    bytes_moved: int
    wall_time: float
    throughput: float
    files_ok: int
    files_failed: int
    integrity: Integrity
    per_stream_bytes: Tuple[int, ...] = ()
    failed_files: Tuple[str, ...] = ()
    retries: int = 0

    @classmethod
    def build(
        cls,
        bytes_moved: int,
        wall_time: float,
        files_ok: int,
        failed_files: List[str],
        per_stream_bytes: List[int],
        verified: bool = True,
        retries: int = 0,
    ) -> "TransferResult":
        """Derive throughput and integrity from the raw tallies."""
        throughput = bytes_moved * 8 / wall_time if wall_time > 0 else 0.0
        if failed_files:
            integrity = Integrity.FAILED
        elif verified:
            integrity = Integrity.VERIFIED
        else:
            integrity = Integrity.SKIPPED
        return cls(
            bytes_moved=bytes_moved,
            wall_time=wall_time,
            throughput=throughput,
            files_ok=files_ok,
            files_failed=len(failed_files),
            integrity=integrity,
            per_stream_bytes=tuple(per_stream_bytes),
            failed_files=tuple(sorted(failed_files)),
            retries=retries,
        )

    @property
    def ok(self) -> bool:
        return self.files_failed == 0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["integrity"] = self.integrity.value
        data["per_stream_bytes"] = list(self.per_stream_bytes)
        data["failed_files"] = list(self.failed_files)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransferResult":
        wall_time = float(data["wall_time"])
        throughput = float(data["throughput"])
        if math.isnan(throughput):
            throughput = 0.0
        return cls(
            bytes_moved=int(data["bytes_moved"]),
            wall_time=wall_time,
            throughput=throughput,
            files_ok=int(data["files_ok"]),
            files_failed=int(data["files_failed"]),
            integrity=Integrity(data["integrity"]),
            per_stream_bytes=tuple(int(b) for b in data.get("per_stream_bytes", [])),
            failed_files=tuple(data.get("failed_files", [])),
            retries=int(data.get("retries", 0)),
        )


@dataclass
class SessionResult:
    """What the receiver saw for one session.

    Verified files are keyed by path, so a file re-sent after a lost ACK
    is counted once.
    """

    session_id: str
    mode: Mode
    completed: Dict[str, Tuple[int, int]] = field(default_factory=dict)  # path -> (size, stream)
    failures: Dict[str, str] = field(default_factory=dict)

    def record_ok(self, path: str, size: int, stream_index: int):
        self.completed[path] = (size, stream_index)
        # A re-sent file that now verified is no longer a failure.
        self.failures.pop(path, None)

    def record_failure(self, path: str, reason: str):
        if path not in self.completed:
            self.failures[path] = reason

    @property
    def files_ok(self) -> int:
        return len(self.completed)

    @property
    def bytes_received(self) -> int:
        return sum(size for size, _ in self.completed.values())

    @property
    def per_stream_bytes(self) -> Dict[int, int]:
        totals: Dict[int, int] = {}
        for size, stream in self.completed.values():
            totals[stream] = totals.get(stream, 0) + size
        return totals

    @property
    def files_failed(self) -> int:
        return len(self.failures)

    @property
    def failed_files(self) -> List[str]:
        return sorted(self.failures)

    @property
    def integrity(self) -> Integrity:
        return Integrity.FAILED if self.failures else Integrity.VERIFIED

    def to_summary(self) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "mode": self.mode.value,
            "bytes_received": self.bytes_received,
            "files_ok": self.files_ok,
            "files_failed": self.files_failed,
            "failed_files": self.failed_files,
            "per_stream_bytes": {str(k): v for k, v in sorted(self.per_stream_bytes.items())},
            "integrity": self.integrity.value,
        }
