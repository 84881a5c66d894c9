"""
Analytic calculators for wide-area data movement.

Bandwidth-delay product, window-limited throughput ceiling, bit error
rate and packet loss conversion, and daily data volume. All functions
are pure; byte quantities are integers and binary prefixes are used
internally.
"""

import math
from dataclasses import dataclass
from enum import Enum

from errors import CalcError

MICROSECONDS_PER_SECOND = 1_000_000
SECONDS_PER_DAY = 86_400
# bits/s -> bytes/day is bits * 86400 / 8, which is an exact integer factor.
_BYTES_PER_DAY_PER_BPS = SECONDS_PER_DAY // 8
DECIMAL_TB = 10**12


@dataclass(frozen=True)
class Bandwidth:
    """Link or transfer rate in bits per second."""

    bits_per_second: int

    def __post_init__(self):
        if isinstance(self.bits_per_second, bool) or not isinstance(self.bits_per_second, int):
            raise CalcError(f"bandwidth must be an integer bit rate, got {self.bits_per_second!r}")
        if self.bits_per_second < 0:
            raise CalcError(f"bandwidth must be non-negative, got {self.bits_per_second}")

    @classmethod
    def gbps(cls, value: float) -> "Bandwidth":
        return cls(int(round(value * 10**9)))


@dataclass(frozen=True)
class Rtt:
    """Round-trip time with microsecond resolution."""

    microseconds: int

    def __post_init__(self):
        if self.microseconds < 0:
            raise CalcError(f"RTT must be non-negative, got {self.microseconds}us")

    @classmethod
    def ms(cls, value: float) -> "Rtt":
        return cls(int(round(value * 1_000)))

    @property
    def seconds(self) -> float:
        return self.microseconds / MICROSECONDS_PER_SECOND


def _check_ratio(name: str, ratio: float):
    if not (0.0 <= ratio <= 1.0) or math.isnan(ratio):
        raise CalcError(f"{name} must be within [0, 1], got {ratio}")


@dataclass(frozen=True)
class PacketLossRate:
    """Fraction of frames lost.

    saturated is set when a conversion produced a value above 1 and it
    was clamped.
    """

    ratio: float
    saturated: bool = False

    def __post_init__(self):
        _check_ratio("packet loss rate", self.ratio)


@dataclass(frozen=True)
class BitErrorRate:
    """Probability that a single transmitted bit is corrupted."""

    ratio: float

    def __post_init__(self):
        _check_ratio("bit error rate", self.ratio)


class LatencyClass(str, Enum):
    LOCAL = "local"
    METROPOLITAN = "metropolitan"
    INTERSTATE = "interstate"
    CROSS_CONTINENT = "cross-continent"
    INTERCONTINENTAL = "intercontinental"


def compute_bdp(bw: Bandwidth, rtt: Rtt) -> int:
    """Bandwidth-delay product: the minimum TCP window for full utilization.

    Args:
        bw: Path bandwidth
        rtt: Round-trip time

    Returns:
        floor(bits_per_second * rtt_seconds / 8) bytes
    """
    return bw.bits_per_second * rtt.microseconds // (8 * MICROSECONDS_PER_SECOND)


def window_ceiling(window: int, rtt: Rtt) -> Bandwidth:
    """Maximum single-stream throughput achievable with a given window.

    Args:
        window: TCP window in bytes
        rtt: Round-trip time, must be positive

    Returns:
        Bandwidth of window * 8 / rtt_seconds (floored to whole bits/s)

    Raises:
        CalcError: rtt is zero, so the ceiling is undefined
    """
    if rtt.microseconds == 0:
        raise CalcError("window ceiling is undefined for a zero RTT")
    if window < 0:
        raise CalcError(f"window must be non-negative, got {window}")
    return Bandwidth(window * 8 * MICROSECONDS_PER_SECOND // rtt.microseconds)


def _check_frame(frame_bytes: int):
    if frame_bytes < 1:
        raise CalcError(f"frame size must be at least 1 byte, got {frame_bytes}")


def ber_from_packet_loss(loss: PacketLossRate, frame_bytes: int) -> BitErrorRate:
    """Convert a frame loss ratio to a bit error rate.

    Args:
        loss: Packet (frame) loss ratio
        frame_bytes: Frame size in bytes

    Returns:
        loss / (frame_bytes * 8)
    """
    _check_frame(frame_bytes)
    return BitErrorRate(loss.ratio / (frame_bytes * 8))


def packet_loss_from_ber(ber: BitErrorRate, frame_bytes: int) -> PacketLossRate:
    """Convert a bit error rate to the first-order packet loss ratio.

    The approximation only holds for small rates; results above 1 are
    clamped to 1 and flagged as saturated.

    Args:
        ber: Bit error rate
        frame_bytes: Frame size in bytes

    Returns:
        ber * frame_bytes * 8, clamped to 1
    """
    _check_frame(frame_bytes)
    ratio = ber.ratio * frame_bytes * 8
    if ratio > 1.0:
        return PacketLossRate(1.0, saturated=True)
    return PacketLossRate(ratio)


def daily_volume(bw: Bandwidth) -> int:
    """Bytes moved in 24 hours at a sustained rate."""
    return bw.bits_per_second * _BYTES_PER_DAY_PER_BPS


def decimal_tb(volume_bytes: int) -> float:
    return volume_bytes / DECIMAL_TB


def rounded_tb(volume_bytes: int) -> int:
    """Decimal terabytes floored to one significant figure (10.8 -> 10, 1080 -> 1000)."""
    tb = volume_bytes / DECIMAL_TB
    if tb < 1:
        return 0
    magnitude = 10 ** int(math.floor(math.log10(tb)))
    return magnitude * int(tb // magnitude)


def transfer_time(volume_bytes: int, bw: Bandwidth) -> float:
    """Seconds needed to move a volume at a sustained rate.

    Raises:
        CalcError: bandwidth is zero
    """
    if bw.bits_per_second == 0:
        raise CalcError("cannot move data at zero bandwidth")
    return volume_bytes * 8 / bw.bits_per_second


def classify_latency(one_way_us: int) -> LatencyClass:
    """Place a one-way latency in the common distance categories."""
    ms = one_way_us / 1_000
    if ms < 1:
        return LatencyClass.LOCAL
    if ms <= 10:
        return LatencyClass.METROPOLITAN
    if ms <= 50:
        return LatencyClass.INTERSTATE
    if ms <= 100:
        return LatencyClass.CROSS_CONTINENT
    return LatencyClass.INTERCONTINENTAL


def netem_queue_limit(bw: Bandwidth, one_way_us: int, mtu: int = 1500, headroom: int = 1000) -> int:
    """Packets a netem queue must hold to keep the emulated pipe full.

    Args:
        bw: Rate the emulated path should sustain
        one_way_us: Delay imposed by the qdisc
        mtu: Packet size used for the estimate
        headroom: Extra packets for the bottleneck buffer

    Returns:
        Queue limit in packets, never below 1000 (the netem default)
    """
    _check_frame(mtu)
    in_flight = compute_bdp(bw, Rtt(one_way_us)) // mtu
    return max(1000, in_flight + headroom)
