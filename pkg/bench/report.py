"""
Per-cell statistics and plot-ready artifacts from sweep records.

Everything written here is a pure function of the records, so the same
records always produce byte-identical files.
"""

import json
import logging
import statistics
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from bench.sweep import SweepRecord
from bench.units import format_bytes
from errors import ReportError
from wan.shell import Shell

logger = logging.getLogger(__name__)

TABLE_NAME = "stats.tsv"
COMMAND_NAME = "throughput.gp"
METADATA_NAME = "metadata.json"
TABLE_COLUMNS = ("mode", "cca", "latency_us", "size_bytes", "n", "mean_bps", "median_bps", "stddev_bps")


@dataclass(frozen=True)
class CellStats:
    """Throughput statistics (bits/s) of one (size, latency, cca, mode) coordinate."""

    size: int
    latency_us: int
    cca: str
    mode: str
    mean: float
    median: float
    stddev: float
    n: int

    @property
    def sort_key(self) -> Tuple[str, str, int, int]:
        return (self.mode, self.cca, self.latency_us, self.size)

    @property
    def curve(self) -> Tuple[str, str, int]:
        return (self.mode, self.cca, self.latency_us)


@dataclass(frozen=True)
class PlotBundle:
    data_files: Tuple[Path, ...]
    command_file: Path
    table_file: Path
    outputs: Tuple[Path, ...] = ()


def aggregate(records: Iterable[SweepRecord]) -> List[CellStats]:
    """Group successful records by coordinate and summarize their throughput.

    Standard deviation is the population form: the iterations of a run are
    the whole population measured. Failed records are left out; see
    exclusions().

    Returns:
        One CellStats per coordinate, sorted by (mode, cca, latency, size)
    """
    samples: Dict[Tuple[int, int, str, str], List[float]] = defaultdict(list)
    for record in records:
        if not record.ok or record.result is None:
            continue
        cell = record.cell
        samples[(cell.size, cell.latency_us, cell.cca, cell.mode)].append(record.result.throughput)

    stats = [
        CellStats(
            size=size,
            latency_us=latency_us,
            cca=cca,
            mode=mode,
            mean=statistics.mean(values),
            median=statistics.median(values),
            stddev=statistics.pstdev(values),
            n=len(values),
        )
        for (size, latency_us, cca, mode), values in samples.items()
    ]
    return sorted(stats, key=lambda s: s.sort_key)


def exclusions(records: Iterable[SweepRecord]) -> List[Dict[str, Any]]:
    """Failed cells with their reasons, in record order."""
    return [
        {**record.cell.to_dict(), "error": record.error or "failed", "timestamp": record.timestamp}
        for record in records
        if not record.ok
    ]


def _prepare(output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create output directory {output_dir}: {e}") from e
    return output_dir


def _write(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write {path}: {e}") from e


def _number(value: float) -> str:
    return f"{value:.3f}"


def render_stats(stats: List[CellStats]) -> str:
    """Tab-separated table: header line, then one row per cell."""
    lines = ["\t".join(TABLE_COLUMNS)]
    for s in sorted(stats, key=lambda s: s.sort_key):
        lines.append(
            "\t".join(
                [s.mode, s.cca, str(s.latency_us), str(s.size), str(s.n),
                 _number(s.mean), _number(s.median), _number(s.stddev)]
            )
        )
    return "\n".join(lines) + "\n"


def emit_tables(stats: List[CellStats], output_dir: Path) -> Path:
    """Write the raw mean/median/stddev table.

    Raises:
        ReportError: Output directory not writable
    """
    path = _prepare(output_dir) / TABLE_NAME
    _write(path, render_stats(stats))
    logger.info(f"Wrote {len(stats)} rows to {path}")
    return path


def curve_file_name(mode: str, cca: str, latency_us: int) -> str:
    return f"curve_{mode}_{cca}_{latency_us}us.dat"


def _curve_title(cca: str, latency_us: int) -> str:
    return f"{cca}, RTT {2 * latency_us / 1000:g} ms"


def _command_file(curves: Dict[Tuple[str, str, int], str]) -> str:
    lines = [
        "# Throughput against file size, one curve per latency and congestion control.",
        "set terminal svg size 1000,600 dynamic",
        "set logscale x 2",
        "set format x '%.0s%cB'",
        "set xlabel 'File size'",
        "set ylabel 'Mean throughput (Gbps)'",
        "set key outside right",
        "set grid",
    ]
    for mode in sorted({mode for mode, _, _ in curves}):
        lines.append("")
        lines.append(f"set output 'throughput_{mode}.svg'")
        lines.append(f"set title '{mode} transfers'")
        plots = [
            f"'{name}' using 1:($2/1e9):($4/1e9) with yerrorlines title '{_curve_title(cca, latency_us)}'"
            for (curve_mode, cca, latency_us), name in sorted(curves.items())
            if curve_mode == mode
        ]
        lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def emit_plots(stats: List[CellStats], output_dir: Path) -> PlotBundle:
    """Write one data file per curve, the gnuplot command file and the summary table.

    Data files hold whitespace-separated columns: size in bytes, mean,
    median and stddev in bits/s, sample count.

    Raises:
        ReportError: No statistics, or output directory not writable
    """
    if not stats:
        raise ReportError("no statistics to plot (every cell failed or the log is empty)")
    output_dir = _prepare(output_dir)

    by_curve: Dict[Tuple[str, str, int], List[CellStats]] = defaultdict(list)
    for s in stats:
        by_curve[s.curve].append(s)

    names = {}
    data_files = []
    for curve in sorted(by_curve):
        mode, cca, latency_us = curve
        name = curve_file_name(mode, cca, latency_us)
        rows = ["# size_bytes\tmean_bps\tmedian_bps\tstddev_bps\tn"]
        for s in sorted(by_curve[curve], key=lambda s: s.size):
            rows.append(f"{s.size}\t{_number(s.mean)}\t{_number(s.median)}\t{_number(s.stddev)}\t{s.n}")
        path = output_dir / name
        _write(path, "\n".join(rows) + "\n")
        names[curve] = name
        data_files.append(path)

    command_file = output_dir / COMMAND_NAME
    _write(command_file, _command_file(names))
    table_file = emit_tables(stats, output_dir)
    outputs = tuple(output_dir / f"throughput_{mode}.svg" for mode in sorted({c[0] for c in names}))
    logger.info(f"Wrote {len(data_files)} curves and {command_file}")
    return PlotBundle(tuple(data_files), command_file, table_file, outputs)


def write_metadata(
    output_dir: Path,
    records: List[SweepRecord],
    stats: List[CellStats],
    header: Optional[Dict[str, Any]] = None,
) -> Path:
    """Record how the statistics were computed and which cells were left out."""
    sizes = sorted({s.size for s in stats})
    metadata = {
        "stddev": "population",
        "median": "middle order statistic; mean of the two middle values for even n",
        "ordering": "cells ran latency, cca, mode, iteration, then file size ascending",
        "records": len(records),
        "cells": len(stats),
        "size_range": [format_bytes(sizes[0]), format_bytes(sizes[-1])] if sizes else [],
        "exclusions": exclusions(records),
        "plan": (header or {}).get("plan"),
    }
    path = _prepare(output_dir) / METADATA_NAME
    _write(path, json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return path


def render_plots(bundle: PlotBundle, shell: Optional[Shell] = None) -> List[Path]:
    """Run gnuplot on the command file if it is installed.

    Returns:
        Images produced; empty when gnuplot is missing

    Raises:
        ReportError: gnuplot ran and failed
    """
    shell = shell or Shell()
    if shell.which("gnuplot") is None:
        logger.warning("gnuplot not found; data and command files are ready for manual plotting")
        return []
    command_file = bundle.command_file.resolve()
    shell.run(["gnuplot", "-e", f"cd '{command_file.parent}'", command_file.name], check=ReportError)
    return [path for path in bundle.outputs if path.exists()]
