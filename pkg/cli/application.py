"""
Command-line application for wanbench.

One argparse tree covers every lab task. Handlers parse quantities,
call the module operations and print their results; numbers shown here
always come from those operations. Exit codes: 0 success, 1 operational
failure, 2 usage error.
"""

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional

import yaml

from bench import calc
from bench.dataset import (
    DESK_BUDGET,
    FULL_BULK_RANGE,
    FULL_STREAMING_RANGE,
    MANIFEST_NAME,
    DatasetMode,
    SeriesKind,
    build_sweep_series,
    generate_dataset,
    hyperscale_spec,
    locate_manifest,
    read_manifest,
    stream_dataset,
    synthetic_manifest,
    verify_dataset,
    write_manifest,
)
from bench.report import aggregate, emit_plots, emit_tables, exclusions, render_plots, render_stats, write_metadata
from bench.sweep import SweepPlan, load_records, plan_cells, run_sweep
from bench.units import (
    format_bandwidth,
    format_bytes,
    format_duration,
    parse_bandwidth,
    parse_bytes,
    parse_duration,
)
from config import LabConfig, config, resolve_config, save_config
from errors import ConfigError, LabError, UnitError
from wan import tuning
from wan.emulation import Emulator, LatencyProfile, measure_rtt
from wan.models import (
    DirectorySink,
    DirectorySource,
    DiscardSink,
    Encryption,
    Mode,
    SyntheticSource,
    TransferResult,
    TransferSpec,
)
from wan.receiver import serve
from wan.sender import transfer, transfer_streaming
from wan.shell import Shell
from wan.staging import Direction, StagingJob, probe_storage, stage
from wan.tls import ensure_lab_certificate, server_context
from wan.tuning import DEFAULT_PROC_ROOT, TuningTarget, render_jsonl, render_table

logger = logging.getLogger(__name__)


def _quantity(parse: Callable[[str], int]) -> Callable[[str], int]:
    def convert(text: str) -> int:
        try:
            return parse(text)
        except UnitError as e:
            raise argparse.ArgumentTypeError(str(e))

    convert.__name__ = parse.__name__.replace("parse_", "")
    return convert


byte_count = _quantity(parse_bytes)
bandwidth = _quantity(parse_bandwidth)
duration = _quantity(parse_duration)


def seconds(text: str) -> float:
    return duration(text) / 1_000_000


def ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a number")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"'{text}' must be within [0, 1]")
    return value


def _list_of(convert: Callable[[str], object]) -> Callable[[str], list]:
    def split(text: str) -> list:
        items = [item.strip() for item in text.split(",") if item.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return [convert(item) for item in items]

    return split


def _print_result(result: TransferResult):
    print(json.dumps(result.to_dict(), sort_keys=True))
    logger.info(
        f"Moved {format_bytes(result.bytes_moved)} in {result.wall_time:.3f}s at "
        f"{format_bandwidth(result.throughput)} ({result.files_ok} ok, {result.files_failed} failed, "
        f"integrity {result.integrity.value})"
    )


class WanBenchApp:
    """Main application: builds the parser and runs one command."""

    def __init__(self):
        self.parser = self._build_parser()
        self._lab: Optional[LabConfig] = None
        self._config_path: Optional[Path] = None

    @property
    def lab(self) -> LabConfig:
        """Lab configuration, loaded on first use so pure commands never touch the filesystem."""
        if self._lab is None:
            self._lab = resolve_config(self._config_path)
        return self._lab

    # ------------------------------------------------------------------ parser

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="wanbench",
            description="Benchmark lab for wide-area data movement: calculators, datasets, "
                        "transfers, latency emulation, host tuning, sweeps and reports.",
        )
        parser.add_argument("--config", type=Path, help="lab configuration file (YAML)")
        verbosity = parser.add_mutually_exclusive_group()
        verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
        commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

        self._add_calc(commands)
        self._add_dataset(commands)
        self._add_transfers(commands)
        self._add_emu(commands)
        self._add_tune(commands)
        self._add_sweep(commands)
        self._add_report(commands)
        self._add_config(commands)
        return parser

    def _add_calc(self, commands):
        calc_parser = commands.add_parser("calc", help="analytic calculators")
        sub = calc_parser.add_subparsers(dest="calc_command", required=True, metavar="CALCULATOR")

        p = sub.add_parser("bdp", help="bandwidth-delay product in bytes")
        p.add_argument("--bw", type=bandwidth, required=True, help="path bandwidth, e.g. 100Gbps")
        p.add_argument("--rtt", type=duration, required=True, help="round-trip time, e.g. 74ms")
        p.set_defaults(handler=self._calc_bdp)

        p = sub.add_parser("ceiling", help="throughput ceiling of a TCP window")
        p.add_argument("--window", type=byte_count, required=True, help="window size, e.g. 64KiB")
        p.add_argument("--rtt", type=duration, required=True)
        p.set_defaults(handler=self._calc_ceiling)

        p = sub.add_parser("ber", help="bit error rate from a packet loss ratio")
        p.add_argument("--loss", type=ratio, required=True, help="packet loss ratio in [0, 1]")
        p.add_argument("--frame", type=byte_count, default=1500, help="frame size (default 1500B)")
        p.set_defaults(handler=self._calc_ber)

        p = sub.add_parser("loss", help="packet loss ratio from a bit error rate")
        p.add_argument("--ber", type=ratio, required=True, help="bit error rate in [0, 1]")
        p.add_argument("--frame", type=byte_count, default=1500)
        p.set_defaults(handler=self._calc_loss)

        p = sub.add_parser("volume", help="data moved per day at a sustained rate")
        p.add_argument("--bw", type=bandwidth, required=True)
        p.set_defaults(handler=self._calc_volume)

        p = sub.add_parser("time", help="time to move a volume at a sustained rate")
        p.add_argument("--volume", type=byte_count, required=True, help="e.g. 4.8PB")
        p.add_argument("--bw", type=bandwidth, required=True)
        p.set_defaults(handler=self._calc_time)

        p = sub.add_parser("latency-class", help="distance category of a one-way latency")
        p.add_argument("--one-way", type=duration, required=True)
        p.set_defaults(handler=self._calc_latency_class)

    def _add_dataset(self, commands):
        dataset_parser = commands.add_parser("dataset", help="synthetic datasets")
        sub = dataset_parser.add_subparsers(dest="dataset_command", required=True, metavar="ACTION")

        p = sub.add_parser("gen", help="generate a uniform-size dataset")
        p.add_argument("--size", type=byte_count, required=True, help="file size (power of two)")
        p.add_argument("--count", type=int, help="number of files (default 2^20)")
        p.add_argument("--total", type=byte_count, help="cap on total bytes; the smaller count wins")
        p.add_argument("--root", type=Path, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=8)
        p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")
        p.set_defaults(handler=self._dataset_gen)

        p = sub.add_parser("verify", help="re-digest a dataset against its manifest")
        p.add_argument("--root", type=Path, required=True)
        p.add_argument("--manifest", type=Path, help=f"manifest file (default ROOT/{MANIFEST_NAME})")
        p.add_argument("--workers", type=int, default=8)
        p.set_defaults(handler=self._dataset_verify)

        p = sub.add_parser("series", help="list (or generate) a power-of-two size series")
        p.add_argument("--kind", choices=[k.value for k in SeriesKind], default=SeriesKind.BULK.value)
        p.add_argument("--min", type=byte_count, dest="min_size")
        p.add_argument("--max", type=byte_count, dest="max_size")
        p.add_argument("--budget", type=byte_count, default=DESK_BUDGET, help="bytes per size (default 4GiB)")
        p.add_argument("--root", type=Path, default=Path("."))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--generate", action="store_true", help="write every size's dataset")
        p.set_defaults(handler=self._dataset_series)

    def _add_transfer_options(self, p):
        p.add_argument("--peer", help="receiver host:port (default from config or WANBENCH_PEER)")
        p.add_argument("--streams", type=int, help="parallel TCP streams")
        p.add_argument("--chunk", type=byte_count, help="application block size")
        p.add_argument("--cca", help="congestion control algorithm, e.g. bbr")
        p.add_argument("--socket-buffer", type=byte_count)
        p.add_argument("--tls", action="store_true", help="encrypt with the lab certificate")
        p.add_argument("--discard", action="store_true", help="receiver digests and drops the bytes")
        p.add_argument("--sink-subdir", default="", help="sub-directory under the receiver root")
        p.add_argument("--no-verify", action="store_true", help="skip end-to-end digest checks")

    def _add_transfers(self, commands):
        p = commands.add_parser("serve", help="run a receiver until interrupted")
        p.add_argument("--listen", help="host:port to bind (default from config)")
        p.add_argument("--root", type=Path, help="directory for received files")
        p.add_argument("--tls", action="store_true", help="accept encrypted sessions")
        p.add_argument("--socket-buffer", type=byte_count)
        p.add_argument("--sessions", type=int, help="exit after this many sessions")
        p.set_defaults(handler=self._serve)

        p = commands.add_parser("transfer", help="bulk transfer of a dataset at rest")
        source = p.add_mutually_exclusive_group()
        source.add_argument("--root", type=Path, help="dataset directory (default production_root)")
        source.add_argument("--synthetic", type=byte_count, metavar="SIZE", help="send generated files of SIZE")
        p.add_argument("--count", type=int, help="synthetic file count")
        p.add_argument("--total", type=byte_count, help="synthetic total bytes")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--manifest", type=Path)
        self._add_transfer_options(p)
        p.set_defaults(handler=self._transfer)

        p = commands.add_parser("stream", help="streaming transfer of files still being written")
        p.add_argument("--watch", type=Path, required=True, help="directory the writer fills")
        p.add_argument("--quiescence", type=seconds, default=2.0, help="idle time that ends the session")
        p.add_argument("--generate", type=byte_count, metavar="SIZE", help="also run a writer growing files of SIZE")
        p.add_argument("--count", type=int, default=1, help="files the writer grows")
        p.add_argument("--step", type=byte_count, default=4 << 20, help="writer append size")
        self._add_transfer_options(p)
        p.set_defaults(handler=self._stream)

        p = commands.add_parser("stage", help="copy between production storage and the burst buffer")
        p.add_argument("--source", type=Path)
        p.add_argument("--dest", type=Path)
        p.add_argument("--direction", choices=["stage-in", "stage-out"], default="stage-in")
        p.add_argument("--manifest", type=Path)
        p.add_argument("--workers", type=int, default=8)
        p.add_argument("--dry-run", action="store_true")
        p.set_defaults(handler=self._stage)

        p = commands.add_parser("probe", help="check that storage outruns the network")
        p.add_argument("--root", type=Path, help="directory to probe (default burst_buffer_root)")
        p.add_argument("--size", type=byte_count, default=1 << 30)
        p.add_argument("--target", type=bandwidth, default=100 * 10**9, help="network rate to beat")
        p.set_defaults(handler=self._probe)

    def _add_emu(self, commands):
        emu_parser = commands.add_parser("emu", help="latency emulation with netem")
        sub = emu_parser.add_subparsers(dest="emu_command", required=True, metavar="ACTION")

        p = sub.add_parser("apply", help="impose a latency profile")
        p.add_argument("--delay", type=duration, required=True, help="one-way delay, e.g. 50ms")
        p.add_argument("--interface", help="interface (default from config)")
        p.add_argument("--jitter", type=duration, default=0)
        p.add_argument("--loss", type=float, default=0.0, help="loss percent")
        p.add_argument("--rate", type=bandwidth, help="rate cap")
        p.add_argument("--placement", choices=["loopback", "both-peers", "single-egress"], default="loopback")
        p.add_argument("--dry-run", action="store_true", help="print the tc commands only")
        p.set_defaults(handler=self._emu_apply)

        p = sub.add_parser("clear", help="remove emulation")
        target = p.add_mutually_exclusive_group()
        target.add_argument("--interface")
        target.add_argument("--all", action="store_true", help="every profile recorded in the state store")
        p.add_argument("--dry-run", action="store_true")
        p.set_defaults(handler=self._emu_clear)

        p = sub.add_parser("rtt", help="measure round trips to a running receiver")
        p.add_argument("--peer")
        p.add_argument("--samples", type=int, default=10)
        p.add_argument("--delay", type=duration, default=0, help="one-way delay the path should show")
        p.add_argument("--tolerance", type=float, default=0.10)
        p.set_defaults(handler=self._emu_rtt)

    def _add_tune(self, commands):
        tune_parser = commands.add_parser("tune", help="kernel and NIC tuning")
        sub = tune_parser.add_subparsers(dest="tune_command", required=True, metavar="ACTION")
        for name, handler, text in (
            ("audit", self._tune_audit, "compare live settings with the target"),
            ("apply", self._tune_apply, "set the target values"),
        ):
            p = sub.add_parser(name, help=text)
            p.add_argument("--interface", help="also check/set ring buffers of this NIC")
            p.add_argument("--format", choices=["table", "jsonl"], default="table")
            p.add_argument("--proc-root", type=Path, default=DEFAULT_PROC_ROOT, help=argparse.SUPPRESS)
            if name == "apply":
                p.add_argument("--dry-run", action="store_true")
            p.set_defaults(handler=handler)

    def _add_sweep(self, commands):
        sweep_parser = commands.add_parser("sweep", help="experiment sweeps")
        sub = sweep_parser.add_subparsers(dest="sweep_command", required=True, metavar="ACTION")
        p = sub.add_parser("run", help="run or resume a sweep")
        p.add_argument("--kind", choices=[k.value for k in SeriesKind], default=SeriesKind.BULK.value)
        p.add_argument("--min", type=byte_count, dest="min_size")
        p.add_argument("--max", type=byte_count, dest="max_size")
        p.add_argument("--budget", type=byte_count, default=DESK_BUDGET)
        p.add_argument("--latencies", type=_list_of(duration), help="one-way delays, e.g. 10ms,50ms,100ms")
        p.add_argument("--ccas", type=_list_of(str))
        p.add_argument("--modes", type=_list_of(Mode), help="bulk,streaming")
        p.add_argument("--iterations", type=int, default=3)
        p.add_argument("--interface", help="emulation interface (default from config)")
        p.add_argument("--placement", choices=["loopback", "both-peers", "single-egress"], default="loopback")
        p.add_argument("--no-emulation", action="store_true", help="record latencies as nominal, apply nothing")
        p.add_argument("--synthetic", action="store_true", help="generate bulk content on the fly")
        p.add_argument("--work-dir", type=Path, help="where datasets are built (default burst_buffer_root)")
        p.add_argument("--log", type=Path, help="record log (default OUTPUT_DIR/sweep.jsonl)")
        p.add_argument("--quiescence", type=seconds, default=2.0)
        p.add_argument("--regenerate", action="store_true", help="rebuild datasets for every iteration")
        p.add_argument("--drop-caches", action="store_true", help="drop page caches before each cell")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dry-run", action="store_true", help="list the cells, run nothing")
        self._add_transfer_options(p)
        p.set_defaults(handler=self._sweep_run)

    def _add_report(self, commands):
        report_parser = commands.add_parser("report", help="statistics and plots from a sweep log")
        sub = report_parser.add_subparsers(dest="report_command", required=True, metavar="ACTION")
        for name, handler, text in (
            ("stats", self._report_stats, "print per-cell statistics"),
            ("plots", self._report_plots, "write gnuplot data and command files"),
            ("tables", self._report_tables, "write the statistics table"),
        ):
            p = sub.add_parser(name, help=text)
            p.add_argument("--log", type=Path, help="record log (default OUTPUT_DIR/sweep.jsonl)")
            if name != "stats":
                p.add_argument("--out", type=Path, help="output directory (default OUTPUT_DIR/report)")
            if name == "plots":
                p.add_argument("--render", action="store_true", help="run gnuplot if installed")
            p.set_defaults(handler=handler)

    def _add_config(self, commands):
        config_parser = commands.add_parser("config", help="lab configuration")
        sub = config_parser.add_subparsers(dest="config_command", required=True, metavar="ACTION")
        p = sub.add_parser("show", help="print the effective configuration")
        p.set_defaults(handler=self._config_show)
        p = sub.add_parser("init", help="write a default configuration file")
        p.add_argument("--path", type=Path, help="destination (default XDG config file)")
        p.add_argument("--force", action="store_true", help="overwrite an existing file")
        p.set_defaults(handler=self._config_init)

    # ------------------------------------------------------------------ run

    def run(self, argv: List[str]) -> int:
        """Parse and execute one command line."""
        if not argv:
            self.parser.print_usage(sys.stderr)
            return 2
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else 2

        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        elif args.quiet:
            logging.getLogger().setLevel(logging.WARNING)
        self._config_path = args.config

        try:
            return args.handler(args)
        except LabError as e:
            logger.debug("Command failed", exc_info=True)
            print(f"error: {e}", file=sys.stderr)
            return 1
        except KeyboardInterrupt:
            print("interrupted", file=sys.stderr)
            return 1

    # ------------------------------------------------------------------ calc

    def _calc_bdp(self, args) -> int:
        bdp = calc.compute_bdp(calc.Bandwidth(args.bw), calc.Rtt(args.rtt))
        print(f"{bdp} bytes")
        return 0

    def _calc_ceiling(self, args) -> int:
        ceiling = calc.window_ceiling(args.window, calc.Rtt(args.rtt))
        print(f"{ceiling.bits_per_second} bps ({format_bandwidth(ceiling.bits_per_second)})")
        return 0

    def _calc_ber(self, args) -> int:
        ber = calc.ber_from_packet_loss(calc.PacketLossRate(args.loss), args.frame)
        print(f"{ber.ratio:.6g}")
        return 0

    def _calc_loss(self, args) -> int:
        loss = calc.packet_loss_from_ber(calc.BitErrorRate(args.ber), args.frame)
        print(f"{loss.ratio:.6g}" + (" (saturated)" if loss.saturated else ""))
        return 0

    def _calc_volume(self, args) -> int:
        volume = calc.daily_volume(calc.Bandwidth(args.bw))
        print(f"{calc.decimal_tb(volume):g} TB/day (rounded {calc.rounded_tb(volume)} TB)")
        return 0

    def _calc_time(self, args) -> int:
        elapsed = calc.transfer_time(args.volume, calc.Bandwidth(args.bw))
        print(f"{elapsed:.0f} s")
        return 0

    def _calc_latency_class(self, args) -> int:
        print(calc.classify_latency(args.one_way).value)
        return 0

    # ------------------------------------------------------------------ dataset

    def _dataset_gen(self, args) -> int:
        spec = hyperscale_spec(args.size, args.root, args.seed, args.count, args.total)
        print(f"{spec.file_count} files x {format_bytes(spec.file_size)} = {format_bytes(spec.total_bytes)} under {spec.root_path}")
        if args.dry_run:
            return 0
        manifest = generate_dataset(spec, workers=args.workers)
        path = spec.root_path / MANIFEST_NAME
        write_manifest(manifest, path)
        print(f"manifest: {path}")
        return 0

    def _dataset_verify(self, args) -> int:
        manifest = read_manifest(args.manifest or args.root / MANIFEST_NAME)
        report = verify_dataset(manifest, args.root, workers=args.workers)
        print(
            f"checked {report.checked}: {len(report.missing)} missing, "
            f"{len(report.size_deviations)} size deviations, {len(report.digest_mismatches)} digest mismatches"
        )
        for path in report.missing:
            print(f"missing\t{path}")
        for path, expected, found in report.size_deviations:
            print(f"size\t{path}\texpected {expected}\tfound {found}")
        for path in report.digest_mismatches:
            print(f"digest\t{path}")
        return 0 if report.intact else 1

    def _series(self, kind: SeriesKind, min_size, max_size, budget, root, seed):
        low, high = FULL_BULK_RANGE if kind == SeriesKind.BULK else FULL_STREAMING_RANGE
        return build_sweep_series(kind, min_size or low, max_size or high, budget, root, seed)

    def _dataset_series(self, args) -> int:
        series = self._series(SeriesKind(args.kind), args.min_size, args.max_size, args.budget, args.root, args.seed)
        print("size\tcount\ttotal")
        for size in series.sizes:
            spec = series.per_size_spec[size]
            print(f"{format_bytes(size)}\t{spec.file_count}\t{format_bytes(spec.total_bytes)}")
        if args.generate:
            for size in series.sizes:
                spec = replace(series.per_size_spec[size], mode=DatasetMode.BULK)
                write_manifest(generate_dataset(spec), spec.root_path / MANIFEST_NAME)
        return 0

    # ------------------------------------------------------------------ transfers

    def _template(self, args, source, mode: Mode, peer: Optional[str] = None) -> TransferSpec:
        peer = peer or args.peer or self.lab.require_peer(args.command)
        return TransferSpec(
            source=source,
            peer_address=peer,
            sink=DiscardSink() if args.discard else DirectorySink(args.sink_subdir),
            mode=mode,
            stream_count=args.streams or self.lab.stream_count,
            chunk_size=args.chunk or self.lab.chunk_size,
            encryption=Encryption.TLS if args.tls else Encryption.NONE,
            cca=args.cca,
            socket_buffer=args.socket_buffer or self.lab.socket_buffer,
            verify=not args.no_verify,
        )

    def _serve(self, args) -> int:
        async def run():
            tls_context = server_context(*ensure_lab_certificate()) if args.tls else None
            handle = await serve(
                args.listen or self.lab.listen_address,
                args.root,
                tls_context,
                args.socket_buffer or self.lab.socket_buffer,
            )
            print(f"listening on {handle.address_string}", flush=True)
            served = 0
            try:
                while args.sessions is None or served < args.sessions:
                    result = await handle.next_result()
                    served += 1
                    print(json.dumps(result.to_summary(), sort_keys=True), flush=True)
            finally:
                await handle.close()

        try:
            asyncio.run(run())
        except KeyboardInterrupt:
            logger.info("Receiver stopped")
        return 0

    def _transfer(self, args) -> int:
        if args.synthetic:
            dataset = hyperscale_spec(args.synthetic, Path("."), args.seed, args.count, args.total)
            manifest = synthetic_manifest(dataset)
            source = SyntheticSource(dataset)
        else:
            root = args.root or self.lab.production_root
            if root is None:
                raise ConfigError("transfer needs --root, --synthetic or production_root", field="production_root")
            manifest = locate_manifest(root, args.manifest)
            source = DirectorySource(root)
        spec = self._template(args, source, Mode.BULK)
        result = asyncio.run(transfer(spec, manifest))
        _print_result(result)
        return 0 if result.ok else 1

    def _stream(self, args) -> int:
        spec = self._template(args, DirectorySource(args.watch), Mode.STREAMING)
        args.watch.mkdir(parents=True, exist_ok=True)

        async def run() -> TransferResult:
            if not args.generate:
                return await transfer_streaming(spec, args.watch, args.quiescence)
            finished = asyncio.Event()
            dataset = hyperscale_spec(args.generate, args.watch, file_count=args.count)
            dataset = replace(dataset, mode=DatasetMode.STREAMING_SOURCE)

            async def write():
                try:
                    await stream_dataset(dataset, step=args.step)
                finally:
                    finished.set()

            writer = asyncio.create_task(write())
            result = await transfer_streaming(spec, args.watch, args.quiescence, done=finished)
            await writer
            return result

        result = asyncio.run(run())
        _print_result(result)
        return 0 if result.ok else 1

    def _stage(self, args) -> int:
        direction = Direction(args.direction)
        production, buffer = self.lab.production_root, self.lab.burst_buffer_root
        default_source, default_dest = (production, buffer) if direction == Direction.STAGE_IN else (buffer, production)
        source, dest = args.source or default_source, args.dest or default_dest
        if source is None or dest is None:
            raise ConfigError("stage needs --source and --dest, or production_root and burst_buffer_root")
        job = StagingJob(source, dest, locate_manifest(source, args.manifest), direction)
        print(f"{direction.value}: {len(job.manifest)} files, {format_bytes(job.manifest.total_bytes)} {source} -> {dest}")
        if args.dry_run:
            return 0
        result = stage(job, workers=args.workers)
        _print_result(result)
        return 0 if result.ok else 1

    def _probe(self, args) -> int:
        root = args.root or self.lab.burst_buffer_root
        if root is None:
            raise ConfigError("probe needs --root or burst_buffer_root", field="burst_buffer_root")
        probe = probe_storage(root, args.size, calc.Bandwidth(args.target))
        print(f"write {format_bandwidth(probe.write_bps)}")
        print(f"read  {format_bandwidth(probe.read_bps)}")
        print(f"target {format_bandwidth(probe.target.bits_per_second)}: {'sufficient' if probe.sufficient else 'INSUFFICIENT'}")
        return 0

    # ------------------------------------------------------------------ emulation

    def _emulator(self, dry_run: bool):
        return Emulator(shell=Shell(dry_run=dry_run))

    def _emu_apply(self, args) -> int:
        profile = LatencyProfile(
            one_way_delay_us=args.delay,
            interface=args.interface or self.lab.interface,
            jitter_us=args.jitter,
            rate_cap=calc.Bandwidth(args.rate) if args.rate else None,
            loss_percent=args.loss,
            placement=args.placement,
        )
        handle = self._emulator(args.dry_run).apply_profile(profile)
        for command in handle.commands:
            print(command)
        return 0

    def _emu_clear(self, args) -> int:
        emulator = self._emulator(args.dry_run)
        if args.all:
            for interface in emulator.clear_recorded():
                print(f"cleared {interface}")
            return 0
        for command in emulator.clear_interface(args.interface or self.lab.interface):
            print(command)
        return 0

    def _emu_rtt(self, args) -> int:
        expected = LatencyProfile(args.delay, interface=None).expected_rtt_us
        peer = args.peer or self.lab.require_peer("emu rtt")
        validation = asyncio.run(measure_rtt(peer, args.samples, expected, args.tolerance))
        print(
            f"measured {format_duration(round(validation.measured_rtt_us))}, expected {format_duration(expected)}: "
            f"{'pass' if validation.passed else 'FAIL'}"
        )
        return 0 if validation.passed else 1

    # ------------------------------------------------------------------ tuning

    def _target(self, args) -> TuningTarget:
        return replace(self.lab.tuning, interface=args.interface or self.lab.tuning.interface)

    def _render(self, args, report) -> str:
        return render_jsonl(report) if args.format == "jsonl" else render_table(report)

    def _tune_audit(self, args) -> int:
        report = tuning.audit(self._target(args), args.proc_root)
        sys.stdout.write(self._render(args, report))
        return 0

    def _tune_apply(self, args) -> int:
        scope = "dry-run" if args.dry_run else "runtime"
        report = tuning.apply(self._target(args), scope=scope, proc_root=args.proc_root)
        for command in report.commands:
            print(command)
        sys.stdout.write(self._render(args, report))
        return 0

    # ------------------------------------------------------------------ sweep

    def _sweep_plan(self, args, work_dir: Path):
        kind = SeriesKind(args.kind)
        series = self._series(kind, args.min_size, args.max_size, args.budget, work_dir, args.seed)
        interface = None if args.no_emulation else (args.interface or self.lab.interface)
        latencies = [
            LatencyProfile(delay, interface=interface, placement=args.placement)
            for delay in (args.latencies or self.lab.latencies)
        ]
        modes = args.modes or [Mode.BULK if kind == SeriesKind.BULK else Mode.STREAMING]
        if args.synthetic:
            source = SyntheticSource(series.per_size_spec[series.sizes[0]])
        else:
            source = DirectorySource(work_dir)
        # A dry run only lists cells, so any syntactically valid peer will do.
        placeholder = "localhost:0" if args.dry_run and not (args.peer or self.lab.peer_address) else None
        template = self._template(args, source, Mode.BULK, placeholder)
        return SweepPlan(
            series=series,
            latencies=tuple(latencies),
            ccas=tuple(args.ccas or self.lab.ccas),
            modes=tuple(modes),
            template=template,
            iterations=args.iterations,
            regenerate=args.regenerate,
            drop_caches=args.drop_caches,
            quiescence=args.quiescence,
        )

    def _sweep_run(self, args) -> int:
        work_dir = args.work_dir or self.lab.burst_buffer_root or self.lab.output_dir / "work"
        log_path = args.log or self.lab.output_dir / "sweep.jsonl"
        plan = self._sweep_plan(args, work_dir)
        if args.dry_run:
            print("latency_us\tcca\tmode\titeration\tsize")
            for cell in plan_cells(plan):
                print(f"{cell.latency_us}\t{cell.cca}\t{cell.mode}\t{cell.iteration}\t{cell.size}")
            print(f"{plan.cell_count} cells, log {log_path}")
            return 0

        records = asyncio.run(run_sweep(plan, log_path, work_dir, emulator=Emulator()))
        failed = [r for r in records if not r.ok]
        print(f"{len(records)} records in {log_path}, {len(failed)} failed")
        return 0 if not failed else 1

    # ------------------------------------------------------------------ report

    def _records(self, args):
        return load_records(args.log or self.lab.output_dir / "sweep.jsonl")

    def _report_dir(self, args) -> Path:
        return args.out or self.lab.output_dir / "report"

    def _report_stats(self, args) -> int:
        _, records = self._records(args)
        sys.stdout.write(render_stats(aggregate(records)))
        for excluded in exclusions(records):
            logger.warning(f"Excluded failed cell: {excluded}")
        return 0

    def _report_plots(self, args) -> int:
        header, records = self._records(args)
        stats = aggregate(records)
        out = self._report_dir(args)
        bundle = emit_plots(stats, out)
        write_metadata(out, records, stats, header)
        for path in (*bundle.data_files, bundle.command_file, bundle.table_file):
            print(path)
        if args.render:
            for image in render_plots(bundle):
                print(image)
        return 0

    def _report_tables(self, args) -> int:
        header, records = self._records(args)
        stats = aggregate(records)
        out = self._report_dir(args)
        print(emit_tables(stats, out))
        write_metadata(out, records, stats, header)
        return 0

    # ------------------------------------------------------------------ config

    def _config_show(self, args) -> int:
        sys.stdout.write(yaml.safe_dump(self.lab.to_dict(), sort_keys=False))
        return 0

    def _config_init(self, args) -> int:
        path = args.path or config.default_config_path
        if path.exists() and not args.force:
            raise ConfigError(f"{path} already exists (use --force to overwrite)")
        save_config(LabConfig(), path)
        print(path)
        return 0


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one wanbench command.

    Args:
        argv: Arguments without the program name; defaults to sys.argv[1:]

    Returns:
        Exit code: 0 success, 1 operational failure, 2 usage error
    """
    return WanBenchApp().run(sys.argv[1:] if argv is None else list(argv))
