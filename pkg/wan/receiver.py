"""
Receiving side of the mover.

A receiver accepts control, data and probe connections. Data connections
carry files as FILE_OPEN / CHUNK / FILE_CLOSE sequences; each file is
hashed as it arrives, written to a `.part` file and renamed only after
its digest is confirmed. Sessions whose sender asked for a discard sink
are hashed and dropped without touching the disk.
"""

import asyncio
import contextlib
import hashlib
import logging
import os
import socket
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import Dict, List, Optional, Tuple

from errors import ProtocolError, TransferError
from wan import protocol
from wan.models import Mode, SessionResult, split_address
from wan.protocol import FrameType, NackReason, Role, SessionHello, write_frame
from wan.sockopts import apply_socket_options

logger = logging.getLogger(__name__)

NO_DIGEST = bytes(32)


def safe_relative_path(path: str) -> Optional[PurePosixPath]:
    """Validate a sender-supplied path; None when it would escape the sink root."""
    if not path or "\\" in path or "\x00" in path:
        return None
    candidate = PurePosixPath(path)
    if candidate.is_absolute() or any(part in ("..", "") for part in candidate.parts):
        return None
    if candidate.parts and candidate.parts[0] == ".":
        return None
    return candidate


class FileSink:
    """Receiver-side state of one incoming file."""

    def __init__(self, file_index: int, path: str, declared_size: Optional[int], root: Optional[Path]):
        self.file_index = file_index
        self.path = path
        self.declared_size = declared_size
        self.received = 0
        self.committed = 0
        self.error: Optional[Tuple[NackReason, str]] = None
        self._digest = hashlib.sha256()
        self._handle = None
        self.final: Optional[Path] = None
        self.part: Optional[Path] = None
        if root is not None:
            self.final = root / path
            self.part = self.final.with_name(self.final.name + ".part")
            try:
                self.final.parent.mkdir(parents=True, exist_ok=True)
                self._handle = open(self.part, "wb")
            except OSError as e:
                self.fail(NackReason.WRITE, f"cannot create {self.part}: {e}")

    def fail(self, reason: NackReason, detail: str):
        if self.error is None:
            self.error = (reason, detail)
            logger.warning(f"File {self.path} failed ({reason.name}): {detail}")

    def write(self, offset: int, data) -> None:
        """Append one chunk; chunks of a file must arrive in offset order."""
        if offset != self.received:
            raise ProtocolError(f"chunk at offset {offset}, expected {self.received}")
        self._digest.update(data)
        if self._handle is not None:
            self._handle.write(data)
        self.received += len(data)

    def mark_growth(self, committed: int):
        if committed < self.received or committed < self.committed:
            self.fail(NackReason.SHRINK, f"source shrank to {committed} after {self.received} bytes were sent")
        self.committed = max(self.committed, committed)

    @property
    def digest(self) -> bytes:
        return self._digest.digest()

    def _close_handle(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def abort(self):
        self._close_handle()
        if self.part is not None:
            with contextlib.suppress(FileNotFoundError):
                self.part.unlink()

    def finish(self, final_size: int, expected_digest: bytes) -> Optional[Tuple[NackReason, str]]:
        """Close the file and verify it.

        Returns:
            None when the file verified and was committed, else (reason, detail)
        """
        if self.error is None:
            if final_size != self.received:
                self.fail(NackReason.SIZE, f"sender closed at {final_size} bytes, received {self.received}")
            elif self.declared_size is not None and self.declared_size != final_size:
                self.fail(NackReason.SIZE, f"announced {self.declared_size} bytes, closed at {final_size}")
            elif expected_digest != NO_DIGEST and expected_digest != self.digest:
                self.fail(NackReason.DIGEST, "sha256 mismatch")

        if self.error is not None:
            self.abort()
            return self.error

        try:
            if self._handle is not None:
                self._handle.flush()
                os.fsync(self._handle.fileno())
            self._close_handle()
            if self.part is not None:
                os.replace(self.part, self.final)
        except OSError as e:
            self.fail(NackReason.WRITE, str(e))
            self.abort()
            return self.error
        return None


@dataclass
class _SessionState:
    result: SessionResult
    sink_root: Optional[Path]


class Receiver:
    """Accepts mover sessions and writes (or discards) their files."""

    def __init__(self, root: Optional[Path] = None, tls_context=None, socket_buffer: Optional[int] = None):
        """Initialize receiver.

        Args:
            root: Directory incoming files are written under. Without a
                root only discard-sink sessions are accepted.
            tls_context: Server SSL context for encrypted sessions
            socket_buffer: Receive/send buffer applied to accepted sockets
        """
        self.root = Path(root).resolve() if root is not None else None
        self.tls_context = tls_context
        self.socket_buffer = socket_buffer
        self._sessions: Dict[bytes, _SessionState] = {}
        self.results: List[SessionResult] = []
        self._completed: asyncio.Queue = asyncio.Queue()

    def _sink_root(self, hello: SessionHello) -> Optional[Path]:
        if hello.sink_discard:
            return None
        if self.root is None:
            raise ProtocolError("receiver has no root directory; use a discard sink")
        if not hello.sink_subdir:
            return self.root
        subdir = safe_relative_path(hello.sink_subdir)
        if subdir is None:
            raise ProtocolError(f"sink sub-directory '{hello.sink_subdir}' escapes the receiver root")
        return self.root / subdir

    def _session(self, hello: SessionHello) -> _SessionState:
        """Session state for a connection; only the control connection opens a session."""
        state = self._sessions.get(hello.session_id)
        if state is not None:
            return state
        if hello.role != Role.CONTROL:
            raise ProtocolError(f"session {hello.session_id.hex()[:8]} has no open control connection")
        result = SessionResult(session_id=hello.session_id.hex(), mode=Mode(hello.mode))
        state = _SessionState(result, self._sink_root(hello))
        self._sessions[hello.session_id] = state
        logger.info(f"Session {result.session_id[:8]} opened ({hello.mode}, {hello.stream_count} streams)")
        return state

    def _drop_session(self, session_id: bytes):
        if self._sessions.pop(session_id, None) is not None:
            logger.warning(f"Session {session_id.hex()[:8]} abandoned without BYE; discarding its state")

    async def handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info("peername")
        hello = None
        try:
            frame = await protocol.expect_frame(reader, FrameType.HELLO)
            hello = SessionHello.decode(frame.payload)
            version = protocol.negotiate_version(protocol.PROTOCOL_VERSION, hello.protocol_version)
            if hello.encryption == "tls" and self.tls_context is None:
                raise ProtocolError("receiver has no TLS certificate configured")
            state = None if hello.role == Role.PROBE else self._session(hello)

            reply = SessionHello(
                protocol_version=version,
                mode=hello.mode,
                stream_count=hello.stream_count,
                encryption=hello.encryption,
                manifest_digest=hello.manifest_digest,
                session_id=hello.session_id,
                role=hello.role,
                stream_index=hello.stream_index,
            )
            if hello.encryption == "tls":
                # The client's TLS handshake must not land in the plain-text reader.
                writer.transport.pause_reading()
            write_frame(writer, FrameType.HELLO, reply.encode())
            await writer.drain()
            if hello.encryption == "tls":
                await writer.start_tls(self.tls_context)

            if hello.role == Role.PROBE:
                await self._probe(reader, writer)
            elif hello.role == Role.CONTROL:
                await self._control(reader, writer, hello, state)
            else:
                await self._data(reader, writer, hello, state)
        except (asyncio.IncompleteReadError, ConnectionError) as e:
            logger.warning(f"Connection from {peer} lost: {e!r}")
        except ProtocolError as e:
            logger.warning(f"Protocol error from {peer}: {e}")
            with contextlib.suppress(Exception):
                write_frame(writer, FrameType.NACK, protocol.encode_nack(0, NackReason.PROTOCOL, str(e)))
                await writer.drain()
        except Exception as e:
            logger.error(f"Error serving {peer}: {e}", exc_info=True)
        finally:
            if hello is not None and hello.role == Role.CONTROL:
                self._drop_session(hello.session_id)
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()

    async def _probe(self, reader, writer):
        while True:
            frame = await protocol.read_frame(reader)
            if frame.frame_type == FrameType.ACK:
                write_frame(writer, FrameType.ACK, frame.payload)
                await writer.drain()
            elif frame.frame_type == FrameType.BYE:
                write_frame(writer, FrameType.BYE)
                await writer.drain()
                return
            else:
                raise ProtocolError(f"unexpected {frame.frame_type.name} on a probe connection")

    async def _control(self, reader, writer, hello: SessionHello, state: _SessionState):
        while True:
            frame = await protocol.read_frame(reader)
            if frame.frame_type == FrameType.MANIFEST:
                count, total = protocol.decode_manifest(frame.payload)
                logger.info(f"Session {state.result.session_id[:8]} announces {count} files, {total} bytes")
            elif frame.frame_type == FrameType.END_OF_SOURCE:
                logger.debug(f"Session {state.result.session_id[:8]} source finished")
            elif frame.frame_type == FrameType.BYE:
                result = state.result
                self._sessions.pop(hello.session_id, None)
                write_frame(writer, FrameType.BYE, protocol.encode_summary(result.to_summary()))
                await writer.drain()
                self.results.append(result)
                self._completed.put_nowait(result)
                logger.info(
                    f"Session {result.session_id[:8]} closed: {result.files_ok} ok, "
                    f"{result.files_failed} failed, {result.bytes_received} bytes"
                )
                return
            else:
                raise ProtocolError(f"unexpected {frame.frame_type.name} on the control connection")

    async def _data(self, reader, writer, hello: SessionHello, state: _SessionState):
        files: Dict[int, FileSink] = {}
        try:
            while True:
                frame = await protocol.read_frame(reader)
                kind = frame.frame_type

                if kind == FrameType.FILE_OPEN:
                    index, size, path = protocol.decode_file_open(frame.payload)
                    previous = files.pop(index, None)
                    if previous is not None:
                        await asyncio.to_thread(previous.abort)
                    rel = safe_relative_path(path)
                    if rel is None:
                        sink = FileSink(index, path, size, None)
                        sink.fail(NackReason.PATH, f"path '{path}' escapes the sink root")
                    else:
                        sink = await asyncio.to_thread(FileSink, index, str(rel), size, state.sink_root)
                    files[index] = sink

                elif kind == FrameType.CHUNK:
                    header, data = protocol.decode_chunk(frame.payload)
                    sink = files.get(header.file_index)
                    if sink is None:
                        raise ProtocolError(f"chunk for file {header.file_index}, which is not open")
                    if sink.error is None:
                        try:
                            await asyncio.to_thread(sink.write, header.offset, data)
                        except ProtocolError as e:
                            sink.fail(NackReason.PROTOCOL, str(e))
                        except OSError as e:
                            sink.fail(NackReason.WRITE, str(e))

                elif kind == FrameType.GROWTH_MARK:
                    index, committed = protocol.decode_growth_mark(frame.payload)
                    sink = files.get(index)
                    if sink is None:
                        raise ProtocolError(f"growth mark for file {index}, which is not open")
                    sink.mark_growth(committed)

                elif kind == FrameType.FILE_CLOSE:
                    index, final_size, digest = protocol.decode_file_close(frame.payload)
                    sink = files.pop(index, None)
                    if sink is None:
                        raise ProtocolError(f"close for file {index}, which is not open")
                    failure = await asyncio.to_thread(sink.finish, final_size, digest)
                    if failure is None:
                        state.result.record_ok(sink.path, final_size, hello.stream_index)
                        write_frame(writer, FrameType.ACK, protocol.encode_ack(index))
                    else:
                        reason, detail = failure
                        state.result.record_failure(sink.path, reason.name)
                        write_frame(writer, FrameType.NACK, protocol.encode_nack(index, reason, detail))
                    await writer.drain()

                elif kind == FrameType.BYE:
                    write_frame(writer, FrameType.BYE)
                    await writer.drain()
                    return

                else:
                    raise ProtocolError(f"unexpected {kind.name} on a data connection")
        finally:
            for sink in files.values():
                sink.abort()


class ReceiverHandle:
    """A running receiver."""

    def __init__(self, server: asyncio.AbstractServer, receiver: Receiver):
        self.server = server
        self.receiver = receiver

    @property
    def address(self) -> Tuple[str, int]:
        host, port = self.server.sockets[0].getsockname()[:2]
        return host, port

    @property
    def address_string(self) -> str:
        host, port = self.address
        return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"

    @property
    def results(self) -> List[SessionResult]:
        return self.receiver.results

    async def next_result(self, timeout: Optional[float] = None) -> SessionResult:
        """Wait for the next session to complete."""
        return await asyncio.wait_for(self.receiver._completed.get(), timeout)

    async def serve_forever(self):
        await self.server.serve_forever()

    async def close(self):
        self.server.close()
        await self.server.wait_closed()


def _listening_socket(listen_address: str, socket_buffer: Optional[int]) -> socket.socket:
    host, port = split_address(listen_address)
    infos = socket.getaddrinfo(host or None, port, type=socket.SOCK_STREAM, flags=socket.AI_PASSIVE)
    family, kind, proto, _, sockaddr = infos[0]
    sock = socket.socket(family, kind, proto)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        # Accepted sockets inherit buffer sizes from the listener.
        apply_socket_options(sock, socket_buffer=socket_buffer)
        sock.bind(sockaddr)
        sock.listen(128)
        sock.setblocking(False)
    except OSError:
        sock.close()
        raise
    return sock


async def serve(
    listen_address: str,
    root: Optional[Path] = None,
    tls_context=None,
    socket_buffer: Optional[int] = None,
) -> ReceiverHandle:
    """Start a receiver.

    Args:
        listen_address: host:port to bind (port 0 picks a free port)
        root: Directory for directory-sink sessions
        tls_context: Server SSL context; required for encrypted sessions
        socket_buffer: Buffer size applied to accepted connections

    Returns:
        Handle exposing the bound address and completed session results

    Raises:
        TransferError: The address cannot be bound
    """
    receiver = Receiver(root, tls_context, socket_buffer)
    try:
        sock = _listening_socket(listen_address, socket_buffer)
    except OSError as e:
        raise TransferError(f"cannot bind {listen_address}: {e}") from e
    server = await asyncio.start_server(receiver.handle_connection, sock=sock)
    handle = ReceiverHandle(server, receiver)
    logger.info(f"Receiver listening on {handle.address_string} (root={receiver.root or 'discard only'})")
    return handle
