import logging

import pytest

from config import (
    DEFAULT_CCAS,
    LabConfig,
    config,
    load_config,
    resolve_config,
    save_config,
)
from errors import ConfigError

LAB = """\
schema_version: 1
peer_address: 10.0.0.2:7700
production_root: prod
latencies: [5ms, 37ms, 74ms]
ccas: [cubic, bbr]
stream_count: 4
chunk_size: 1MiB
socket_buffer: 64MiB
tuning:
  ring_rx: 4096
  ring_tx: 4096
  interface: eth1
"""


def write(tmp_path, text, name="lab.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_lab_file_is_parsed_with_units(tmp_path):
    cfg = load_config(write(tmp_path, LAB))
    assert cfg.peer_address == "10.0.0.2:7700"
    assert cfg.production_root == (tmp_path / "prod").resolve()
    assert cfg.latencies == [5_000, 37_000, 74_000]
    assert cfg.ccas == ["cubic", "bbr"]
    assert cfg.stream_count == 4
    assert cfg.chunk_size == 1 << 20
    assert cfg.socket_buffer == 64 << 20
    assert cfg.tuning.ring_rx == 4096
    assert cfg.tuning.interface == "eth1"
    assert "net.core.rmem_max" in cfg.tuning.kernel_params


def test_missing_fields_take_defaults(tmp_path):
    cfg = load_config(write(tmp_path, "schema_version: 1\n"))
    assert cfg.peer_address is None
    assert cfg.ccas == DEFAULT_CCAS
    assert cfg.output_dir == (config.data_home / "output").resolve()
    assert not config.data_home.exists()


def test_saved_config_loads_back_unchanged(tmp_path):
    cfg = load_config(write(tmp_path, LAB))
    save_config(cfg, tmp_path / "copy" / "lab.yaml")
    assert load_config(tmp_path / "copy" / "lab.yaml") == cfg


def test_bad_duration_names_line_and_field(tmp_path):
    path = write(tmp_path, LAB.replace("[5ms, 37ms, 74ms]", "[5ms, soon]"))
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == 4
    assert info.value.field == "latencies"
    assert "line 4, field 'latencies'" in str(info.value)


def test_bad_peer_address_names_the_field(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, "peer_address: no-port-here\n"))
    assert info.value.field == "peer_address"
    assert info.value.line == 1


@pytest.mark.parametrize(
    "text, field",
    [
        ("schema_version: 2\n", "schema_version"),
        ("stream_count: 0\n", "stream_count"),
        ("chunk_size: 1KiB\n", "chunk_size"),
        ("ccas: []\n", "ccas"),
        ("tuning: [1, 2]\n", "tuning"),
        ("tuning:\n  kernel_params:\n    'bad key': 1\n", "tuning"),
    ],
)
def test_invalid_values(tmp_path, text, field):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, text))
    assert info.value.field == field


def test_malformed_yaml_reports_a_line(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, "peer_address: 10.0.0.2:7700\nccas: [cubic\n"))
    assert info.value.line is not None


def test_top_level_must_be_a_mapping(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "- just\n- a list\n"))


def test_unknown_fields_are_warned_about(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="config"):
        load_config(write(tmp_path, "schema_version: 1\ncolour: blue\n"))
    assert "ignoring unknown field 'colour'" in caplog.text
    assert ":2:" in caplog.text


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("WANBENCH_PEER", "192.0.2.7:9000")
    monkeypatch.setenv("WANBENCH_OUTPUT_DIR", str(tmp_path / "out"))
    cfg = load_config(write(tmp_path, LAB))
    assert cfg.peer_address == "192.0.2.7:9000"
    assert cfg.output_dir == (tmp_path / "out").resolve()


def test_bad_peer_in_environment(monkeypatch):
    monkeypatch.setenv("WANBENCH_PEER", "nowhere")
    with pytest.raises(ConfigError, match="WANBENCH_PEER"):
        resolve_config()


def test_resolution_order(tmp_path, monkeypatch):
    assert resolve_config().peer_address is None

    config.default_config_path.write_text("peer_address: 10.0.0.9:1\n")
    assert resolve_config().peer_address == "10.0.0.9:1"

    monkeypatch.setenv("WANBENCH_CONFIG", str(write(tmp_path, "peer_address: 10.0.0.8:1\n", "env.yaml")))
    assert resolve_config().peer_address == "10.0.0.8:1"

    explicit = write(tmp_path, "peer_address: 10.0.0.7:1\n", "explicit.yaml")
    assert resolve_config(explicit).peer_address == "10.0.0.7:1"


def test_explicit_config_must_exist(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "absent.yaml")


def test_peer_is_required_by_name():
    with pytest.raises(ConfigError, match="'transfer' needs a peer address"):
        LabConfig().require_peer("transfer")
