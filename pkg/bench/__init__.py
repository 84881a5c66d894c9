"""Lab-side computation: quantities, calculators, datasets, sweeps and reports."""

from .calc import Bandwidth, BitErrorRate, PacketLossRate, Rtt, compute_bdp, window_ceiling
from .units import parse_bandwidth, parse_bytes, parse_duration

__all__ = [
    'Bandwidth',
    'BitErrorRate',
    'PacketLossRate',
    'Rtt',
    'compute_bdp',
    'window_ceiling',
    'parse_bandwidth',
    'parse_bytes',
    'parse_duration',
]
