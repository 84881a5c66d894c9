"""
Host network tuning: audit and runtime apply.

Kernel parameters are read from the sysctl tree under /proc/sys (the
root is configurable so audits can run against a prepared directory)
and written with `sysctl -w`. NIC ring buffers are read and set with
`ethtool`. Nothing is persisted to boot-time configuration.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from errors import TuningError
from wan.shell import Shell

logger = logging.getLogger(__name__)

DEFAULT_PROC_ROOT = Path("/proc/sys")
RING_DEFAULT = 8160

DEFAULT_KERNEL_PARAMS: Dict[str, str] = {
    "net.core.rmem_max": "2147483647",
    "net.core.wmem_max": "2147483647",
    "net.ipv4.tcp_rmem": "4096 67108864 1073741824",
    "net.ipv4.tcp_wmem": "4096 67108864 1073741824",
    "net.ipv4.tcp_mtu_probing": "1",
    "net.core.default_qdisc": "fq_codel",
    "net.ipv4.tcp_congestion_control": "cubic",
    "net.core.netdev_max_backlog": "8192",
}

_KEY_PATTERN = re.compile(r"^[a-z0-9_]+(\.[A-Za-z0-9_\-]+)+$")


def normalize_value(value: str) -> str:
    """Collapse internal whitespace; the kernel prints tcp_rmem with tabs."""
    return " ".join(str(value).split())


@dataclass(frozen=True)
class TuningTarget:
    """Desired kernel parameters and NIC ring sizes."""

    kernel_params: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_KERNEL_PARAMS))
    ring_rx: int = RING_DEFAULT
    ring_tx: int = RING_DEFAULT
    interface: Optional[str] = None

    def __post_init__(self):
        bad = [k for k in self.kernel_params if not _KEY_PATTERN.match(k)]
        if bad:
            raise TuningError("invalid kernel parameter names", failed_keys=bad)
        if self.ring_rx < 1 or self.ring_tx < 1:
            raise TuningError(f"ring sizes must be positive, got rx={self.ring_rx} tx={self.ring_tx}")

    @classmethod
    def empty(cls) -> "TuningTarget":
        return cls(kernel_params={}, interface=None)


class Overall(str, Enum):
    TUNED = "tuned"
    PARTIAL = "partial"
    UNTUNED = "untuned"


@dataclass(frozen=True)
class ParamStatus:
    key: str
    target: str
    current: Optional[str]
    note: str = ""

    @property
    def known(self) -> bool:
        return self.current is not None

    @property
    def matches(self) -> bool:
        return self.current is not None and normalize_value(self.current) == normalize_value(self.target)

    def to_dict(self) -> Dict:
        return {
            "key": self.key,
            "current": self.current,
            "target": self.target,
            "matches": self.matches,
            "note": self.note,
        }


@dataclass(frozen=True)
class AuditReport:
    params: Tuple[ParamStatus, ...]
    commands: Tuple[str, ...] = ()

    @property
    def overall(self) -> Overall:
        if all(p.matches for p in self.params):
            return Overall.TUNED
        if any(p.matches for p in self.params):
            return Overall.PARTIAL
        return Overall.UNTUNED

    @property
    def mismatched(self) -> List[str]:
        return [p.key for p in self.params if not p.matches]

    @property
    def unknown(self) -> List[str]:
        return [p.key for p in self.params if not p.known]


def param_path(key: str, proc_root: Path = DEFAULT_PROC_ROOT) -> Path:
    return Path(proc_root) / key.replace(".", "/")


def read_param(key: str, proc_root: Path = DEFAULT_PROC_ROOT) -> Optional[str]:
    """Live value of a kernel parameter, or None when it cannot be read."""
    try:
        return normalize_value(param_path(key, proc_root).read_text())
    except OSError as e:
        logger.debug(f"Cannot read {key}: {e}")
        return None


_RING_FIELD = re.compile(r"^(RX|TX):\s+(\d+)", re.MULTILINE)


def parse_ring_settings(output: str) -> Tuple[Dict[str, int], Dict[str, int]]:
    """Parse `ethtool -g` output into (maximums, current) for RX and TX."""
    maximums: Dict[str, int] = {}
    current: Dict[str, int] = {}
    head, sep, tail = output.partition("Current hardware settings:")
    if not sep:
        return maximums, current
    for name, value in _RING_FIELD.findall(head):
        maximums[name.lower()] = int(value)
    for name, value in _RING_FIELD.findall(tail):
        current[name.lower()] = int(value)
    return maximums, current


def read_rings(interface: str, shell: Shell) -> Optional[Tuple[Dict[str, int], Dict[str, int]]]:
    if not shell.which("ethtool"):
        logger.warning("ethtool not found; ring buffers are audit-only and reported unknown")
        return None
    result = shell.run(["ethtool", "-g", interface], mutates=False)
    if not result.ok:
        logger.warning(f"Cannot read ring buffers of {interface}: {result.stderr.strip()}")
        return None
    return parse_ring_settings(result.stdout)


def _ring_statuses(target: TuningTarget, shell: Shell) -> List[ParamStatus]:
    if not target.interface:
        return []
    rings = read_rings(target.interface, shell)
    statuses = []
    for name, wanted in (("rx", target.ring_rx), ("tx", target.ring_tx)):
        key = f"ring.{target.interface}.{name}"
        if rings is None or name not in rings[1]:
            statuses.append(ParamStatus(key, str(wanted), None, "unreadable"))
            continue
        maximums, current = rings
        note = ""
        if name in maximums and maximums[name] < wanted:
            note = f"hardware maximum {maximums[name]}"
        statuses.append(ParamStatus(key, str(wanted), str(current[name]), note))
    return statuses


def audit(
    target: TuningTarget,
    proc_root: Path = DEFAULT_PROC_ROOT,
    shell: Optional[Shell] = None,
) -> AuditReport:
    """Compare live kernel and NIC settings against a target. Never modifies the host.

    Args:
        target: Desired settings
        proc_root: Root of the sysctl tree
        shell: Used for read-only ethtool queries

    Returns:
        Per-parameter status; unreadable keys are reported with current=None
    """
    shell = shell or Shell()
    statuses = []
    for key in sorted(target.kernel_params):
        current = read_param(key, proc_root)
        statuses.append(ParamStatus(key, normalize_value(target.kernel_params[key]), current,
                                    "" if current is not None else "unreadable"))
    statuses.extend(_ring_statuses(target, shell))
    report = AuditReport(tuple(statuses))
    logger.info(f"Tuning audit: {report.overall.value} ({len(report.mismatched)} mismatched)")
    return report


def apply(
    target: TuningTarget,
    scope: str = "runtime",
    proc_root: Path = DEFAULT_PROC_ROOT,
    shell: Optional[Shell] = None,
) -> AuditReport:
    """Set the target values, then re-audit.

    Args:
        target: Desired settings
        scope: "runtime" to change the host, "dry-run" to only list commands
        proc_root: Root of the sysctl tree used by the re-audit
        shell: Shell to run through; a dry-run shell is created for dry-run scope

    Returns:
        Post-state audit (pre-state for dry-run) carrying the command list

    Raises:
        TuningError: Unknown scope, or some keys could not be set (lists them)
    """
    if scope not in ("runtime", "dry-run"):
        raise TuningError(f"unknown scope '{scope}', expected runtime or dry-run")
    if shell is None:
        shell = Shell(dry_run=scope == "dry-run")
    elif scope == "dry-run" and not shell.dry_run:
        raise TuningError("dry-run scope needs a dry-run shell")

    commands: List[str] = []
    failed: List[str] = []

    for key in sorted(target.kernel_params):
        value = normalize_value(target.kernel_params[key])
        result = shell.run(["sysctl", "-w", f"{key}={value}"])
        commands.append(result.command_line)
        if not result.ok:
            failed.append(key)

    if target.interface:
        rings = read_rings(target.interface, shell)
        if rings is None:
            logger.warning(f"Skipping ring buffer changes on {target.interface}")
        else:
            maximums = rings[0]
            rx = min(target.ring_rx, maximums.get("rx", target.ring_rx))
            tx = min(target.ring_tx, maximums.get("tx", target.ring_tx))
            if (rx, tx) != (target.ring_rx, target.ring_tx):
                logger.warning(f"{target.interface} caps rings at rx={rx} tx={tx}")
            result = shell.run(["ethtool", "-G", target.interface, "rx", str(rx), "tx", str(tx)])
            commands.append(result.command_line)
            if not result.ok:
                failed.extend([f"ring.{target.interface}.rx", f"ring.{target.interface}.tx"])

    if failed:
        raise TuningError("could not set", failed_keys=failed)

    report = audit(target, proc_root, shell)
    return AuditReport(report.params, tuple(commands))


def render_table(report: AuditReport) -> str:
    """Fixed-width human table; identical reports render identically."""
    rows = [("PARAMETER", "CURRENT", "TARGET", "STATUS")]
    for p in report.params:
        status = "ok" if p.matches else ("unknown" if not p.known else "MISMATCH")
        if p.note and p.known:
            status = f"{status} ({p.note})"
        rows.append((p.key, p.current if p.current is not None else "-", p.target, status))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = [
        f"{row[0]:<{widths[0]}}  {row[1]:<{widths[1]}}  {row[2]:<{widths[2]}}  {row[3]}".rstrip()
        for row in rows
    ]
    lines.append(f"overall: {report.overall.value}")
    return "\n".join(lines) + "\n"


def render_jsonl(report: AuditReport) -> str:
    """One JSON object per parameter, then a summary line."""
    lines = [json.dumps(p.to_dict(), sort_keys=True) for p in report.params]
    lines.append(json.dumps({"overall": report.overall.value, "mismatched": report.mismatched}, sort_keys=True))
    return "\n".join(lines) + "\n"
