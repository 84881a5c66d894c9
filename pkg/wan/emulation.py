"""
WAN latency emulation with the kernel's netem queueing discipline.

Profiles are applied with `tc qdisc replace ... root netem` on an
interface's egress, recorded in the state store so a crashed run can be
cleaned up, and validated by timing round trips over the mover's own
probe connection.
"""

import asyncio
import logging
import statistics
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil

from bench.calc import Bandwidth, netem_queue_limit
from config import config
from errors import EmulationError, PrivilegeError, ProtocolError
from wan import protocol
from wan.protocol import FrameType, Role, SessionHello, write_frame
from wan.sender import open_channel
from wan.shell import Shell
from wan.storage import EmulationStateStore

logger = logging.getLogger(__name__)

PROC_STATUS = Path("/proc/self/status")
CAP_NET_ADMIN = 12
DEFAULT_TOLERANCE = 0.10
DEFAULT_FLOOR_US = 2_000
# Assumed when neither a rate cap nor the link speed is known (loopback reports 0).
NOMINAL_RATE = Bandwidth(10 * 10**9)

_ALREADY_CLEAR = ("Cannot delete qdisc with handle of zero", "No such file or directory", "Cannot find specified qdisc")


class Placement(str, Enum):
    """Where the delay is imposed.

    loopback: one qdisc sees both directions, so it carries the one-way delay.
    both_peers: each host delays its own egress by the one-way delay.
    single_egress: one host carries the whole round trip (2x one-way).
    """

    LOOPBACK = "loopback"
    BOTH_PEERS = "both-peers"
    SINGLE_EGRESS = "single-egress"


@dataclass(frozen=True)
class LatencyProfile:
    """Emulated path; interface None means the latency is nominal and nothing is applied."""

    one_way_delay_us: int
    interface: Optional[str] = "lo"
    jitter_us: int = 0
    rate_cap: Optional[Bandwidth] = None
    loss_percent: float = 0.0
    placement: Placement = Placement.LOOPBACK

    def __post_init__(self):
        if self.one_way_delay_us < 0:
            raise EmulationError(f"delay must be >= 0, got {self.one_way_delay_us}us")
        if self.jitter_us < 0:
            raise EmulationError(f"jitter must be >= 0, got {self.jitter_us}us")
        if not 0.0 <= self.loss_percent <= 100.0:
            raise EmulationError(f"loss must be within 0-100%, got {self.loss_percent}")
        object.__setattr__(self, "placement", Placement(self.placement))

    @property
    def expected_rtt_us(self) -> int:
        return 2 * self.one_way_delay_us

    @property
    def qdisc_delay_us(self) -> int:
        if self.placement == Placement.SINGLE_EGRESS:
            return 2 * self.one_way_delay_us
        return self.one_way_delay_us

    @property
    def emulated(self) -> bool:
        return self.interface is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "one_way_delay_us": self.one_way_delay_us,
            "interface": self.interface,
            "jitter_us": self.jitter_us,
            "rate_cap_bps": self.rate_cap.bits_per_second if self.rate_cap else None,
            "loss_percent": self.loss_percent,
            "placement": self.placement.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LatencyProfile":
        rate = data.get("rate_cap_bps")
        return cls(
            one_way_delay_us=int(data["one_way_delay_us"]),
            interface=data.get("interface"),
            jitter_us=int(data.get("jitter_us", 0)),
            rate_cap=Bandwidth(int(rate)) if rate else None,
            loss_percent=float(data.get("loss_percent", 0.0)),
            placement=Placement(data.get("placement", Placement.LOOPBACK.value)),
        )


@dataclass(frozen=True)
class PathValidation:
    """Measured against expected round trip.

    passed holds when |measured - expected| <= tolerance * expected + floor;
    the absolute floor absorbs host overhead on near-zero expectations.
    """

    measured_rtt_us: float
    expected_rtt_us: int
    tolerance: float = DEFAULT_TOLERANCE
    floor_us: int = DEFAULT_FLOOR_US
    samples: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return abs(self.measured_rtt_us - self.expected_rtt_us) <= self.tolerance * self.expected_rtt_us + self.floor_us


@dataclass
class AppliedProfile:
    """Handle returned by apply_profile; clear it to restore the interface."""

    profile: LatencyProfile
    commands: List[str]
    dry_run: bool = False
    cleared: bool = False


def has_net_admin(status_path: Path = PROC_STATUS) -> bool:
    """Whether the effective capability set includes CAP_NET_ADMIN."""
    try:
        for line in Path(status_path).read_text().splitlines():
            if line.startswith("CapEff:"):
                return bool(int(line.split()[1], 16) >> CAP_NET_ADMIN & 1)
    except (OSError, ValueError, IndexError):
        pass
    return False


def parse_root_qdisc(show_output: str) -> Optional[List[str]]:
    """tc arguments that reinstall the root qdisc listed by 'tc qdisc show'.

    Returns None when the root is the kernel's own (handle 0:), which
    deleting the root qdisc brings back.
    """
    for line in show_output.splitlines():
        fields = line.split()
        if len(fields) < 4 or fields[0] != "qdisc" or "root" not in fields:
            continue
        kind, handle = fields[1], fields[2]
        if handle == "0:":
            return None
        params = fields[fields.index("root") + 1:]
        if params[:1] == ["refcnt"]:
            params = params[2:]
        return ["handle", handle, kind, *params]
    return None


def interface_names() -> List[str]:
    return sorted(psutil.net_if_addrs())


def _link_rate(interface: str) -> Bandwidth:
    stats = psutil.net_if_stats().get(interface)
    if stats is not None and stats.speed > 0:
        return Bandwidth(stats.speed * 10**6)
    return NOMINAL_RATE


class Emulator:
    """Single owner of traffic-control state; apply and clear are serialized process-wide."""

    _lock = threading.Lock()

    def __init__(
        self,
        shell: Optional[Shell] = None,
        store: Optional[EmulationStateStore] = None,
        status_path: Path = PROC_STATUS,
    ):
        self.shell = shell or Shell()
        self._store = store
        self.status_path = status_path

    @property
    def store(self) -> EmulationStateStore:
        if self._store is None:
            self._store = EmulationStateStore()
        return self._store

    def require_privilege(self):
        """Raise PrivilegeError unless the process may change queueing disciplines."""
        if self.shell.dry_run:
            return
        if not has_net_admin(self.status_path):
            raise PrivilegeError(
                "latency emulation needs CAP_NET_ADMIN: run as root, or grant it with "
                "'setcap cap_net_admin+ep' on the interpreter, or use --dry-run to print the commands"
            )

    def _check_interface(self, interface: Optional[str]):
        if interface is None:
            raise EmulationError("profile has no interface; nothing to apply")
        if interface not in psutil.net_if_addrs():
            raise EmulationError(f"unknown interface '{interface}' (have: {', '.join(interface_names())})")

    def netem_command(self, profile: LatencyProfile) -> List[str]:
        """The exact tc invocation that applies a profile."""
        rate = profile.rate_cap or _link_rate(profile.interface)
        limit = netem_queue_limit(rate, profile.qdisc_delay_us)
        argv = ["tc", "qdisc", "replace", "dev", profile.interface, "root", "netem",
                "limit", str(limit), "delay", f"{profile.qdisc_delay_us}us"]
        if profile.jitter_us:
            argv.append(f"{profile.jitter_us}us")
        if profile.loss_percent:
            argv += ["loss", f"{profile.loss_percent:g}%"]
        if profile.rate_cap:
            argv += ["rate", f"{profile.rate_cap.bits_per_second}bit"]
        return argv

    def clear_command(self, interface: str) -> List[str]:
        return ["tc", "qdisc", "del", "dev", interface, "root"]

    def restore_command(self, interface: str, previous: List[str]) -> List[str]:
        return ["tc", "qdisc", "replace", "dev", interface, "root", *previous]

    def _recorded_store(self) -> Optional[EmulationStateStore]:
        """The state store, or None on a dry run that would have to create it."""
        if self._store is None and self.shell.dry_run and not config.state_db_path.exists():
            return None
        return self.store

    def _previous_root(self, interface: str) -> Optional[List[str]]:
        row = self.store.lookup(interface)
        if row is not None:
            # Still carrying an earlier profile; keep what was there before it
            return row["previous"]
        shown = self.shell.run(["tc", "qdisc", "show", "dev", interface, "root"], mutates=False)
        return parse_root_qdisc(shown.stdout) if shown.ok else None

    def apply_profile(self, profile: LatencyProfile) -> AppliedProfile:
        """Install a profile, replacing whatever this interface carried.

        The root qdisc found beforehand is recorded so clearing puts it back.

        Raises:
            PrivilegeError: CAP_NET_ADMIN missing (not checked in dry-run)
            EmulationError: Unknown interface or tc failure
        """
        self._check_interface(profile.interface)
        self.require_privilege()
        argv = self.netem_command(profile)
        with self._lock:
            previous = None if self.shell.dry_run else self._previous_root(profile.interface)
            result = self.shell.run(argv, check=EmulationError)
            if not self.shell.dry_run:
                self.store.record(profile.interface, profile.to_dict(), [result.command_line], previous)
        logger.info(
            f"Applied {profile.qdisc_delay_us}us netem delay on {profile.interface} "
            f"(expected RTT {profile.expected_rtt_us}us)"
        )
        return AppliedProfile(profile, [result.command_line], dry_run=self.shell.dry_run)

    def clear_interface(self, interface: str) -> List[str]:
        """Put back the root qdisc recorded at apply time, or delete the root
        qdisc when the kernel default was there. Clearing twice is harmless."""
        self.require_privilege()
        with self._lock:
            store = self._recorded_store()
            row = store.lookup(interface) if store is not None else None
            result = None
            if row is not None and row["previous"]:
                result = self.shell.run(self.restore_command(interface, row["previous"]))
                if not result.ok:
                    logger.warning(
                        f"Could not restore the earlier qdisc on {interface} ({result.stderr.strip()}); "
                        f"falling back to the kernel default"
                    )
                    result = None
            if result is None:
                result = self.shell.run(self.clear_command(interface))
                if not result.ok and not any(marker in result.stderr for marker in _ALREADY_CLEAR):
                    raise EmulationError(f"'{result.command_line}' failed: {result.stderr.strip()}")
            if not self.shell.dry_run:
                self.store.forget(interface)
        logger.info(f"Cleared emulation on {interface}")
        return [result.command_line]

    def clear_profile(self, handle: AppliedProfile) -> List[str]:
        if handle.cleared:
            logger.debug(f"Profile on {handle.profile.interface} already cleared")
            return []
        commands = self.clear_interface(handle.profile.interface)
        handle.cleared = True
        return commands

    def clear_recorded(self) -> List[str]:
        """Tear down every profile recorded by this or an earlier (crashed) process.

        Returns:
            Interfaces that were cleared
        """
        store = self._recorded_store()
        if store is None:
            return []
        cleared = []
        for row in store.applied():
            self.clear_interface(row["interface"])
            cleared.append(row["interface"])
        return cleared


async def measure_rtt(
    peer_address: str,
    samples: int = 10,
    expected_rtt_us: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    floor_us: int = DEFAULT_FLOOR_US,
    timeout: float = 10.0,
) -> PathValidation:
    """Time echo round trips over a probe connection to a running receiver.

    Args:
        peer_address: Receiver host:port
        samples: Number of round trips; the median is reported
        expected_rtt_us: Round trip the emulated path should show
        tolerance: Allowed relative deviation
        floor_us: Allowed absolute deviation

    Raises:
        TransferError: Peer unreachable
    """
    if samples < 1:
        raise EmulationError(f"need at least one sample, got {samples}")
    hello = SessionHello(protocol.PROTOCOL_VERSION, "bulk", 1, "none", role=Role.PROBE)
    reader, writer, _ = await open_channel(peer_address, hello, timeout=timeout)
    loop = asyncio.get_running_loop()
    rtts = []
    try:
        for n in range(samples):
            started = loop.time()
            write_frame(writer, FrameType.ACK, protocol.encode_ack(n))
            await writer.drain()
            frame = await asyncio.wait_for(protocol.expect_frame(reader, FrameType.ACK), timeout)
            if protocol.decode_ack(frame.payload) != n:
                raise ProtocolError("probe echo out of order")
            rtts.append((loop.time() - started) * 1_000_000)
        write_frame(writer, FrameType.BYE)
        await writer.drain()
        await protocol.expect_frame(reader, FrameType.BYE)
    finally:
        writer.close()

    validation = PathValidation(statistics.median(rtts), expected_rtt_us, tolerance, floor_us, rtts)
    logger.info(
        f"RTT to {peer_address}: median {validation.measured_rtt_us / 1000:.3f}ms over {samples} samples, "
        f"expected {expected_rtt_us / 1000:.3f}ms -> {'pass' if validation.passed else 'FAIL'}"
    )
    return validation
