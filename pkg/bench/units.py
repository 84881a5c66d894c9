"""
Quantity parsing and formatting.

Byte counts accept binary (KiB, MiB, GiB, TiB, PiB) and decimal
(KB, MB, GB, TB, PB) suffixes, bandwidths accept decimal bit rates
(bps, Kbps, Mbps, Gbps, Tbps) and durations accept us, ms and s.
A suffix is always required: "1024" alone is rejected.
"""

import re
from decimal import Decimal, InvalidOperation

from errors import UnitError

_QUANTITY = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z/]+)\s*$")

BYTE_UNITS = {
    "b": 1,
    "kib": 1 << 10,
    "mib": 1 << 20,
    "gib": 1 << 30,
    "tib": 1 << 40,
    "pib": 1 << 50,
    "kb": 10**3,
    "mb": 10**6,
    "gb": 10**9,
    "tb": 10**12,
    "pb": 10**15,
}

BANDWIDTH_UNITS = {
    "bps": 1,
    "kbps": 10**3,
    "mbps": 10**6,
    "gbps": 10**9,
    "tbps": 10**12,
}

DURATION_UNITS = {
    "us": 1,
    "ms": 1_000,
    "s": 1_000_000,
}

KIB = 1 << 10
MIB = 1 << 20
GIB = 1 << 30
TIB = 1 << 40


def _split(text: str, kind: str):
    match = _QUANTITY.match(str(text))
    if not match:
        raise UnitError(f"invalid {kind} '{text}': expected a number followed by a unit")
    try:
        number = Decimal(match.group(1))
    except InvalidOperation as e:
        raise UnitError(f"invalid {kind} '{text}'") from e
    return number, match.group(2).lower()


def _scale(text: str, kind: str, table: dict) -> int:
    number, unit = _split(text, kind)
    if unit not in table:
        known = ", ".join(sorted(table))
        raise UnitError(f"unknown {kind} unit in '{text}' (known: {known})")
    value = number * table[unit]
    if value != value.to_integral_value():
        raise UnitError(f"{kind} '{text}' is not a whole number of base units")
    return int(value)


def parse_bytes(text: str) -> int:
    """Parse a byte count such as '64KiB' or '1TB'.

    Args:
        text: Quantity with an explicit unit suffix

    Returns:
        Number of bytes
    """
    return _scale(text, "byte count", BYTE_UNITS)


def parse_bandwidth(text: str) -> int:
    """Parse a bit rate such as '100Gbps'.

    Args:
        text: Quantity with an explicit unit suffix

    Returns:
        Bits per second
    """
    return _scale(text, "bandwidth", BANDWIDTH_UNITS)


def parse_duration(text: str) -> int:
    """Parse a duration such as '74ms'.

    Args:
        text: Quantity with an explicit unit suffix

    Returns:
        Microseconds
    """
    return _scale(text, "duration", DURATION_UNITS)


def format_bytes(value: int) -> str:
    """Render bytes with the largest exact binary unit, else plain bytes."""
    for unit, size in (("TiB", TIB), ("GiB", GIB), ("MiB", MIB), ("KiB", KIB)):
        if value >= size and value % size == 0:
            return f"{value // size}{unit}"
    return f"{value}B"


def format_bandwidth(bits_per_second: float) -> str:
    """Render a bit rate with a decimal prefix and three significant decimals."""
    for unit, size in (("Tbps", 10**12), ("Gbps", 10**9), ("Mbps", 10**6), ("Kbps", 10**3)):
        if bits_per_second >= size:
            return f"{bits_per_second / size:.3f} {unit}"
    return f"{bits_per_second:.0f} bps"


def format_duration(microseconds: int) -> str:
    """Render a duration as whole milliseconds when exact, else microseconds."""
    if microseconds % 1_000 == 0:
        return f"{microseconds // 1_000}ms"
    return f"{microseconds}us"
