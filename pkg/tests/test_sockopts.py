import socket

import pytest

from errors import SocketOptionError
from wan.sockopts import apply_socket_options, available_ccas


def tcp_socket():
    return socket.socket(socket.AF_INET, socket.SOCK_STREAM)


def test_buffers_are_read_back():
    with tcp_socket() as sock:
        applied = apply_socket_options(sock, socket_buffer=256 * 1024)
    # Linux doubles the request, capped by rmem_max/wmem_max.
    assert applied.send_buffer > 0
    assert applied.recv_buffer > 0
    assert applied.cca


def test_unknown_algorithm_is_rejected():
    with tcp_socket() as sock:
        with pytest.raises(SocketOptionError):
            apply_socket_options(sock, cca="no-such-cca")


def test_loaded_algorithm_can_be_selected():
    loaded = available_ccas()
    if "cubic" not in loaded and "reno" not in loaded:
        pytest.skip("no standard congestion control reported by the kernel")
    cca = "cubic" if "cubic" in loaded else "reno"
    with tcp_socket() as sock:
        try:
            applied = apply_socket_options(sock, cca=cca)
        except SocketOptionError:
            pytest.skip(f"{cca} not allowed for this user")
    assert applied.cca == cca


def test_available_list_of_missing_file(tmp_path):
    assert available_ccas(tmp_path / "absent") == []


def test_available_list_parsing(tmp_path):
    path = tmp_path / "available"
    path.write_text("reno cubic bbr\n")
    assert available_ccas(path) == ["reno", "cubic", "bbr"]
