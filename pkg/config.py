"""
Configuration management for wanbench.

Handles application directories following the XDG Base Directory spec
and the lab configuration file (YAML, schema-versioned).
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from bench.units import format_bytes, format_duration, parse_bytes, parse_duration
from errors import ConfigError, TransferError, TuningError, UnitError
from wan.models import split_address
from wan.tuning import TuningTarget

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ENV_PEER = "WANBENCH_PEER"
ENV_OUTPUT_DIR = "WANBENCH_OUTPUT_DIR"
ENV_CONFIG = "WANBENCH_CONFIG"


class Config:
    """Application directory manager."""

    APP_NAME = "wanbench"
    APP_VERSION = "0.1.0"

    def __init__(self):
        """Initialize configuration paths."""
        self._config_dir: Optional[Path] = None
        self._data_dir: Optional[Path] = None
        self._cache_dir: Optional[Path] = None

    def _xdg_path(self, env_name: str, fallback: Path) -> Path:
        xdg = os.getenv(env_name)
        return (Path(xdg) if xdg else fallback) / self.APP_NAME

    def _xdg_dir(self, env_name: str, fallback: Path) -> Path:
        path = self._xdg_path(env_name, fallback)
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def config_dir(self) -> Path:
        """Get configuration directory path.

        Returns:
            Path to config directory (e.g., ~/.config/wanbench)
        """
        if self._config_dir is None:
            self._config_dir = self._xdg_dir("XDG_CONFIG_HOME", Path.home() / ".config")
        return self._config_dir

    @property
    def data_dir(self) -> Path:
        """Get data directory path.

        Returns:
            Path to data directory (e.g., ~/.local/share/wanbench)
        """
        if self._data_dir is None:
            self._data_dir = self._xdg_dir("XDG_DATA_HOME", Path.home() / ".local" / "share")
        return self._data_dir

    @property
    def data_home(self) -> Path:
        """Where data_dir lives, without creating it."""
        if self._data_dir is not None:
            return self._data_dir
        return self._xdg_path("XDG_DATA_HOME", Path.home() / ".local" / "share")

    @property
    def cache_dir(self) -> Path:
        """Get cache directory path.

        Returns:
            Path to cache directory (e.g., ~/.cache/wanbench)
        """
        if self._cache_dir is None:
            self._cache_dir = self._xdg_dir("XDG_CACHE_HOME", Path.home() / ".cache")
        return self._cache_dir

    @property
    def state_db_path(self) -> Path:
        """SQLite file recording applied emulation profiles."""
        return self.data_home / "wanbench.db"

    @property
    def tls_dir(self) -> Path:
        """Directory holding the generated lab certificate."""
        tls_dir = self.data_dir / "tls"
        tls_dir.mkdir(parents=True, exist_ok=True)
        return tls_dir

    @property
    def log_path(self) -> Path:
        return self.cache_dir / "wanbench.log"

    @property
    def default_config_path(self) -> Path:
        return self.config_dir / "wanbench.yaml"


# Global configuration instance
config = Config()


DEFAULT_LATENCIES = [10_000, 50_000, 100_000]
DEFAULT_CCAS = ["cubic", "bbr", "reno"]
DEFAULT_LISTEN = "0.0.0.0:7700"


@dataclass
class LabConfig:
    """Everything an operator sets once per lab."""

    schema_version: int = SCHEMA_VERSION
    peer_address: Optional[str] = None
    listen_address: str = DEFAULT_LISTEN
    production_root: Optional[Path] = None
    burst_buffer_root: Optional[Path] = None
    output_dir: Optional[Path] = None
    interface: str = "lo"
    latencies: List[int] = field(default_factory=lambda: list(DEFAULT_LATENCIES))
    ccas: List[str] = field(default_factory=lambda: list(DEFAULT_CCAS))
    stream_count: int = 8
    chunk_size: int = 4 << 20
    socket_buffer: Optional[int] = None
    tuning: TuningTarget = field(default_factory=TuningTarget)

    def require_peer(self, command: str) -> str:
        """Return the peer address or fail naming the command that needs it."""
        if not self.peer_address:
            raise ConfigError(
                f"'{command}' needs a peer address: set peer_address in the config file, "
                f"pass --peer, or export {ENV_PEER}",
                field="peer_address",
            )
        return self.peer_address

    def to_dict(self) -> Dict[str, Any]:
        """Serialize to the file representation (explicit-unit strings)."""
        return {
            "schema_version": self.schema_version,
            "peer_address": self.peer_address,
            "listen_address": self.listen_address,
            "production_root": str(self.production_root) if self.production_root else None,
            "burst_buffer_root": str(self.burst_buffer_root) if self.burst_buffer_root else None,
            "output_dir": str(self.output_dir) if self.output_dir else None,
            "interface": self.interface,
            "latencies": [format_duration(us) for us in self.latencies],
            "ccas": list(self.ccas),
            "stream_count": self.stream_count,
            "chunk_size": format_bytes(self.chunk_size),
            "socket_buffer": format_bytes(self.socket_buffer) if self.socket_buffer else None,
            "tuning": {
                "kernel_params": dict(self.tuning.kernel_params),
                "ring_rx": self.tuning.ring_rx,
                "ring_tx": self.tuning.ring_tx,
                "interface": self.tuning.interface,
            },
        }


KNOWN_FIELDS = set(LabConfig().to_dict())


def _key_lines(text: str) -> Dict[str, int]:
    """Map top-level keys to their 1-based line numbers."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {key.value: key.start_mark.line + 1 for key, _ in node.value}


def _resolve_path(value: Any, base: Path) -> Optional[Path]:
    if value in (None, ""):
        return None
    path = Path(str(value)).expanduser()
    if not path.is_absolute():
        path = base / path
    return path.resolve()


def _parse_fields(data: Dict[str, Any], base: Path, lines: Dict[str, int]) -> LabConfig:
    cfg = LabConfig()
    current = None

    def fail(message: str):
        raise ConfigError(message, line=lines.get(current), field=current)

    try:
        current = "schema_version"
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            fail(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})")

        current = "peer_address"
        if data.get("peer_address"):
            split_address(str(data["peer_address"]))
            cfg.peer_address = str(data["peer_address"])

        current = "listen_address"
        if data.get("listen_address"):
            split_address(str(data["listen_address"]))
            cfg.listen_address = str(data["listen_address"])

        for name in ("production_root", "burst_buffer_root", "output_dir"):
            current = name
            setattr(cfg, name, _resolve_path(data.get(name), base))

        current = "interface"
        if data.get("interface"):
            cfg.interface = str(data["interface"])

        current = "latencies"
        if "latencies" in data:
            if not isinstance(data["latencies"], list) or not data["latencies"]:
                fail("must be a non-empty list of durations such as 10ms")
            cfg.latencies = [parse_duration(str(v)) for v in data["latencies"]]

        current = "ccas"
        if "ccas" in data:
            if not isinstance(data["ccas"], list) or not data["ccas"]:
                fail("must be a non-empty list of congestion control names")
            cfg.ccas = [str(v) for v in data["ccas"]]

        current = "stream_count"
        if "stream_count" in data:
            count = data["stream_count"]
            if not isinstance(count, int) or count < 1:
                fail("must be an integer >= 1")
            cfg.stream_count = count

        current = "chunk_size"
        if data.get("chunk_size"):
            cfg.chunk_size = parse_bytes(str(data["chunk_size"]))
            if cfg.chunk_size < 4096:
                fail("must be at least 4KiB")

        current = "socket_buffer"
        if data.get("socket_buffer"):
            cfg.socket_buffer = parse_bytes(str(data["socket_buffer"]))

        current = "tuning"
        tuning = data.get("tuning") or {}
        if not isinstance(tuning, dict):
            fail("must be a mapping")
        cfg.tuning = TuningTarget(
            kernel_params={str(k): str(v) for k, v in (tuning.get("kernel_params") or TuningTarget().kernel_params).items()},
            ring_rx=int(tuning.get("ring_rx", TuningTarget().ring_rx)),
            ring_tx=int(tuning.get("ring_tx", TuningTarget().ring_tx)),
            interface=tuning.get("interface"),
        )
    except (UnitError, TransferError, TuningError, ValueError, TypeError) as e:
        raise ConfigError(str(e), line=lines.get(current), field=current) from e
    return cfg


def apply_environment(cfg: LabConfig) -> LabConfig:
    """Apply WANBENCH_PEER / WANBENCH_OUTPUT_DIR overrides."""
    peer = os.getenv(ENV_PEER)
    if peer:
        try:
            split_address(peer)
        except TransferError as e:
            raise ConfigError(f"{ENV_PEER}: {e}") from e
        cfg.peer_address = peer
    output_dir = os.getenv(ENV_OUTPUT_DIR)
    if output_dir:
        cfg.output_dir = Path(output_dir).expanduser().resolve()
    if cfg.output_dir is None:
        cfg.output_dir = (config.data_home / "output").resolve()
    return cfg


def load_config(path: Path) -> LabConfig:
    """Load, validate and default-fill a lab configuration file.

    Args:
        path: YAML configuration file

    Returns:
        Parsed configuration with absolute paths and environment overrides applied

    Raises:
        ConfigError: File missing, malformed or holding invalid values
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")

    try:
        data = yaml.safe_load(text) or {}
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise ConfigError(f"malformed YAML: {e.problem}", line=line)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML: {e}")

    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of field names to values", line=1)

    lines = _key_lines(text)
    for unknown in sorted(set(data) - KNOWN_FIELDS):
        logger.warning(f"{path}:{lines.get(unknown, '?')}: ignoring unknown field '{unknown}'")

    cfg = _parse_fields(data, path.parent.resolve(), lines)
    logger.debug(f"Loaded lab configuration from {path}")
    return apply_environment(cfg)


def resolve_config(explicit: Optional[Path] = None) -> LabConfig:
    """Find the configuration a command should use.

    Order: explicit path, WANBENCH_CONFIG, the XDG default file, built-in
    defaults. Only the first two fail when the file is missing.
    """
    path = explicit or os.getenv(ENV_CONFIG)
    if path:
        return load_config(Path(path))
    default = config.default_config_path
    if default.exists():
        return load_config(default)
    logger.debug("No configuration file; using defaults")
    return apply_environment(LabConfig())


def save_config(cfg: LabConfig, path: Path):
    """Write a configuration file that load_config reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    logger.info(f"Saved lab configuration to {path}")
