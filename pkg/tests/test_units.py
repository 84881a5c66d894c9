import pytest

from bench.units import (
    format_bandwidth,
    format_bytes,
    format_duration,
    parse_bandwidth,
    parse_bytes,
    parse_duration,
)
from errors import UnitError


@pytest.mark.parametrize(
    "text, expected",
    [
        ("64KiB", 65_536),
        ("4MiB", 4 * 2**20),
        ("1TiB", 2**40),
        ("1TB", 10**12),
        ("4.8PB", 4_800 * 10**12),
        ("1500B", 1500),
        (" 2 GiB ", 2 * 2**30),
    ],
)
def test_parse_bytes(text, expected):
    assert parse_bytes(text) == expected


@pytest.mark.parametrize("text", ["1024", "", "KiB", "1.5B", "10 parsecs", "-1KiB"])
def test_parse_bytes_rejects(text):
    with pytest.raises(UnitError):
        parse_bytes(text)


def test_parse_bandwidth_is_decimal():
    assert parse_bandwidth("100Gbps") == 100 * 10**9
    assert parse_bandwidth("1.5Mbps") == 1_500_000
    with pytest.raises(UnitError):
        parse_bandwidth("100GiB")


def test_parse_duration_returns_microseconds():
    assert parse_duration("74ms") == 74_000
    assert parse_duration("2s") == 2_000_000
    assert parse_duration("250us") == 250
    with pytest.raises(UnitError):
        parse_duration("0.5us")
    with pytest.raises(UnitError):
        parse_duration("100")


def test_formatting():
    assert format_bytes(4 * 2**20) == "4MiB"
    assert format_bytes(1500) == "1500B"
    assert format_bandwidth(5_242_880) == "5.243 Mbps"
    assert format_duration(74_000) == "74ms"
    assert format_duration(1_500) == "1500us"


def test_format_then_parse_bytes():
    for value in (1, 1024, 3 * 2**20, 2**40):
        assert parse_bytes(format_bytes(value)) == value
