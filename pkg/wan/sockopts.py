"""
Per-connection TCP options: congestion control and socket buffers.
"""

import logging
import socket
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from errors import SocketOptionError

logger = logging.getLogger(__name__)

AVAILABLE_CCA_PATH = Path("/proc/sys/net/ipv4/tcp_available_congestion_control")
# Linux value; older Pythons do not export the constant.
TCP_CONGESTION = getattr(socket, "TCP_CONGESTION", 13)


@dataclass(frozen=True)
class AppliedOptions:
    """Effective values read back from the socket."""

    cca: str
    send_buffer: int
    recv_buffer: int


def available_ccas(path: Path = AVAILABLE_CCA_PATH) -> List[str]:
    """Congestion control algorithms the kernel has loaded."""
    try:
        return path.read_text().split()
    except OSError:
        return []


def current_cca(sock: socket.socket) -> str:
    raw = sock.getsockopt(socket.IPPROTO_TCP, TCP_CONGESTION, 16)
    return raw.split(b"\x00", 1)[0].decode("ascii")


def apply_socket_options(
    sock: socket.socket,
    cca: Optional[str] = None,
    socket_buffer: Optional[int] = None,
) -> AppliedOptions:
    """Select the congestion control algorithm and buffer sizes for one socket.

    Buffers must be set before connect/listen to influence window scaling.

    Args:
        sock: TCP socket
        cca: Algorithm name such as "cubic", "bbr" or "reno"
        socket_buffer: SO_SNDBUF/SO_RCVBUF request in bytes

    Returns:
        Values read back from the socket (the kernel doubles buffer requests)

    Raises:
        SocketOptionError: Unknown algorithm (lists the available ones) or
            the kernel refused a value
    """
    if cca:
        available = available_ccas()
        if available and cca not in available:
            raise SocketOptionError(
                f"congestion control '{cca}' is not available; choose one of: {', '.join(available)}"
            )
        try:
            sock.setsockopt(socket.IPPROTO_TCP, TCP_CONGESTION, cca.encode("ascii"))
        except OSError as e:
            # Loaded but not in tcp_allowed_congestion_control for unprivileged users.
            raise SocketOptionError(
                f"cannot select congestion control '{cca}': {e.strerror or e}; "
                f"available: {', '.join(available) or 'unknown'}"
            ) from e

    if socket_buffer:
        if socket_buffer < 1:
            raise SocketOptionError(f"socket buffer must be positive, got {socket_buffer}")
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, socket_buffer)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, socket_buffer)
        except OSError as e:
            raise SocketOptionError(f"cannot set socket buffer {socket_buffer}: {e}") from e

    applied = AppliedOptions(
        cca=current_cca(sock),
        send_buffer=sock.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF),
        recv_buffer=sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF),
    )
    if cca and applied.cca != cca:
        raise SocketOptionError(f"requested congestion control '{cca}' but socket reports '{applied.cca}'")
    logger.debug(f"Socket options: cca={applied.cca} sndbuf={applied.send_buffer} rcvbuf={applied.recv_buffer}")
    return applied
