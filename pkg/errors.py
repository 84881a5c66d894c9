"""
Exception hierarchy for wanbench.

Every operation raises a subclass of LabError so the CLI can map
failures to exit code 1 with a single diagnostic line.
"""

from typing import Iterable, List, Optional


class LabError(Exception):
    """Base class for all wanbench failures."""


class ConfigError(LabError):
    """Configuration file or field is invalid."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class UnitError(LabError):
    """A quantity string could not be parsed."""


class CalcError(LabError):
    """A calculator was called outside its domain."""


class DatasetError(LabError):
    """Dataset generation or verification failed."""

    def __init__(self, message: str, partial_paths: Optional[Iterable[str]] = None):
        super().__init__(message)
        self.partial_paths: List[str] = list(partial_paths or [])


class InsufficientSpaceError(DatasetError):
    """Destination does not have room for the requested bytes."""


class ProtocolError(LabError):
    """Peer sent a frame that violates the wire protocol."""


class IncompleteFrame(LabError):
    """More bytes are needed before a frame can be decoded."""

    def __init__(self, needed: int):
        super().__init__(f"incomplete frame: need {needed} more byte(s)")
        self.needed = needed


class TransferError(LabError):
    """A transfer could not be started or completed."""


class SocketOptionError(LabError):
    """A socket option (congestion control, buffer) could not be applied."""


class EmulationError(LabError):
    """Traffic-control emulation failed."""


class PrivilegeError(EmulationError):
    """The process lacks the capability needed for a system change."""


class TuningError(LabError):
    """Kernel or NIC tuning could not be applied."""

    def __init__(self, message: str, failed_keys: Optional[Iterable[str]] = None):
        self.failed_keys: List[str] = list(failed_keys or [])
        if self.failed_keys:
            message = f"{message}: {', '.join(self.failed_keys)}"
        super().__init__(message)


class SweepError(LabError):
    """A sweep could not start or its record log is unusable."""


class ReportError(LabError):
    """Report artifacts could not be produced."""
